use crate::error::{shape_err, Result};

/// Numpy-style broadcast of two shapes (right-aligned, size-1 dims stretch).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            (x, y) => {
                return Err(shape_err(
                    "broadcast",
                    format!("cannot broadcast {a:?} with {b:?} (dims {x} vs {y})"),
                ))
            }
        };
    }
    Ok(out)
}

fn dim_from_right(shape: &[usize], k: usize) -> usize {
    if k < shape.len() {
        shape[shape.len() - 1 - k]
    } else {
        1
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides
}

/// Strides of `src` when viewed with the (broadcast) shape `out`; stretched dims get 0.
pub(crate) fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let base = contiguous_strides(src);
    let offset = out.len() - src.len();
    (0..out.len())
        .map(|i| {
            if i < offset || src[i - offset] == 1 {
                0
            } else {
                base[i - offset]
            }
        })
        .collect()
}

/// Walks every multi-index of `shape` in row-major order, yielding the linear
/// offsets it maps to under each stride set.
pub(crate) struct Odometer<const K: usize> {
    shape: Vec<usize>,
    strides: [Vec<usize>; K],
    index: Vec<usize>,
    offsets: [usize; K],
    remaining: usize,
}

impl<const K: usize> Odometer<K> {
    pub(crate) fn new(shape: &[usize], strides: [Vec<usize>; K]) -> Self {
        Self {
            shape: shape.to_vec(),
            strides,
            index: vec![0; shape.len()],
            offsets: [0; K],
            remaining: numel(shape),
        }
    }
}

impl<const K: usize> Iterator for Odometer<K> {
    type Item = [usize; K];

    fn next(&mut self) -> Option<[usize; K]> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let current = self.offsets;
        for d in (0..self.shape.len()).rev() {
            self.index[d] += 1;
            for k in 0..K {
                self.offsets[k] += self.strides[k][d];
            }
            if self.index[d] < self.shape[d] {
                break;
            }
            for k in 0..K {
                self.offsets[k] -= self.strides[k][d] * self.shape[d];
            }
            self.index[d] = 0;
        }
        Some(current)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

impl<const K: usize> ExactSizeIterator for Odometer<K> {}

/// Calls `f` with the offsets of every multi-index of `shape`, like
/// [`Odometer`], but steps the innermost dimension in a tight loop.
pub(crate) fn for_each_offset<const K: usize>(shape: &[usize], strides: [Vec<usize>; K], mut f: impl FnMut([usize; K])) {
    let Some(last) = shape.len().checked_sub(1) else {
        f([0; K]);
        return;
    };
    let inner: [usize; K] = std::array::from_fn(|k| strides[k][last]);
    let outer = strides.map(|s| s[..last].to_vec());
    for base in Odometer::new(&shape[..last], outer) {
        let mut off = base;
        for _ in 0..shape[last] {
            f(off);
            for k in 0..K {
                off[k] += inner[k];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape(&[4, 1, 5], &[3, 1]).unwrap(), vec![4, 3, 5]);
        assert!(broadcast_shape(&[2, 3], &[4]).is_err());
    }

    #[test]
    fn odometer_visits_offsets_in_order() {
        let out = [2, 3];
        let a = broadcast_strides(&[3], &out);
        let offs: Vec<_> = Odometer::new(&out, [contiguous_strides(&out), a])
            .map(|[o, a]| (o, a))
            .collect();
        assert_eq!(offs, vec![(0, 0), (1, 1), (2, 2), (3, 0), (4, 1), (5, 2)]);
    }

    #[test]
    fn fast_walk_matches_odometer() {
        let out = [2, 1, 3, 4];
        let strides = [contiguous_strides(&out), broadcast_strides(&[3, 1], &out)];
        let slow: Vec<_> = Odometer::new(&out, strides.clone()).collect();
        let mut fast = Vec::new();
        for_each_offset(&out, strides, |o| fast.push(o));
        assert_eq!(slow, fast);
        let mut scalar = Vec::new();
        for_each_offset(&[], [vec![]], |o| scalar.push(o));
        assert_eq!(scalar, vec![[0]]);
    }
}
