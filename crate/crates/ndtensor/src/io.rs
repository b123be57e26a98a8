//! `STT1` named-tensor files.
//!
//! Layout: the magic bytes `STT1`, then for every tensor until end of file:
//! name length (u32), UTF-8 name, rank (u32), dims (u32 each), and the raw
//! values as f32. All integers and floats are little-endian.

use std::io::{Read, Write};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"STT1";

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(&str, &Tensor<f32>)]) -> Result<()> {
    w.write_all(MAGIC)?;
    for (name, t) in tensors {
        w.write_all(&len_u32(name.len())?.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&len_u32(t.rank())?.to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&len_u32(d)?.to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(TensorError::Format("missing STT1 magic".into()));
    }
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| TensorError::Format(format!("tensor name is not UTF-8: {e}")))?
            .to_owned();
        let rank = cur.u32()? as usize;
        let shape = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = cur.take(n.checked_mul(4).ok_or_else(|| TensorError::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| TensorError::Format(format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| TensorError::Format(format!("length {n} does not fit in u32")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| TensorError::Format("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
