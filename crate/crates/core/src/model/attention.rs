use std::io::Write;

use ndtensor::{Element, Tape};

use super::forward::Trace;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    Temporal,
    Spatial,
    Full,
}

impl MapKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MapKind::Temporal => "temporal",
            MapKind::Spatial => "spatial",
            MapKind::Full => "full",
        }
    }
}

/// One square weight matrix for a (layer, head, kind).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub layer: usize,
    pub head: usize,
    pub kind: MapKind,
    pub size: usize,
    /// Row-major `size × size`.
    pub weights: Vec<f64>,
}

impl AttentionMap {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.size + col]
    }
}

/// Attention of the first sample in a batch.
///
/// Temporal maps are averaged over joints and spatial maps over frames, giving
/// one `T × T` and one `N × N` matrix per layer and head.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionMaps {
    pub maps: Vec<AttentionMap>,
}

/// Averages the leading `groups` matrices of `heads × size × size` blocks.
fn mean_over_groups<T: Element>(data: &[T], groups: usize, heads: usize, size: usize) -> Vec<Vec<f64>> {
    let block = size * size;
    (0..heads)
        .map(|h| {
            let mut acc = vec![0.0; block];
            for g in 0..groups {
                let src = &data[(g * heads + h) * block..(g * heads + h + 1) * block];
                for (a, v) in acc.iter_mut().zip(src) {
                    *a += v.to_f64_lossy();
                }
            }
            acc.iter_mut().for_each(|a| *a /= groups as f64);
            acc
        })
        .collect()
}

impl AttentionMaps {
    pub fn from_trace<T: Element>(tape: &Tape<T>, trace: &Trace) -> Self {
        let mut maps = Vec::new();
        for (layer, lt) in trace.layers.iter().enumerate() {
            let sources = [
                (lt.temporal, MapKind::Temporal),
                (lt.spatial, MapKind::Spatial),
                (lt.full, MapKind::Full),
            ];
            for (var, kind) in sources {
                let Some(var) = var else { continue };
                let w = tape.value(var);
                let s = w.shape();
                let r = s.len();
                let (heads, size) = (s[r - 3], s[r - 1]);
                let groups = s[1..r - 3].iter().product::<usize>();
                let first = &w.data()[..groups * heads * size * size];
                for (head, weights) in mean_over_groups(first, groups, heads, size).into_iter().enumerate() {
                    maps.push(AttentionMap {
                        layer,
                        head,
                        kind,
                        size,
                        weights,
                    });
                }
            }
        }
        Self { maps }
    }

    pub fn of_kind(&self, kind: MapKind) -> impl Iterator<Item = &AttentionMap> {
        self.maps.iter().filter(move |m| m.kind == kind)
    }
}

/// Writes `layer,head,kind,row,col,weight` rows. With `header` false only the
/// data rows are written, for appending further steps.
pub fn dump_attention<W: Write>(mut w: W, maps: &AttentionMaps, header: bool) -> std::io::Result<()> {
    if header {
        writeln!(w, "layer,head,kind,row,col,weight")?;
    }
    for m in &maps.maps {
        for row in 0..m.size {
            for col in 0..m.size {
                writeln!(w, "{},{},{},{row},{col},{}", m.layer, m.head, m.kind.as_str(), m.at(row, col))?;
            }
        }
    }
    Ok(())
}
