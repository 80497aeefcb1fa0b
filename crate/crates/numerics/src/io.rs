//! Binary tensor format.
//!
//! ```text
//! magic    8 bytes  "MLFDTNSR"
//! version  u16 LE   FORMAT_VERSION
//! dtype    u8       0 = f64 IEEE-754
//! rank     u8
//! extents  rank x u64 LE
//! payload  product(extents) x f64 LE, row-major
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{NumericsError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MLFDTNSR";
pub const FORMAT_VERSION: u16 = 1;
pub const DTYPE_F64: u8 = 0;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(&encode(t)?)?;
    Ok(())
}

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank())
        .map_err(|_| NumericsError::Format(format!("rank {} exceeds 255", t.rank())))?;
    let mut buf = Vec::with_capacity(12 + 8 * t.rank() + 8 * t.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(DTYPE_F64);
    buf.push(rank);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

/// Decodes one tensor from the front of `bytes`, returning it and the bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(Tensor, usize)> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(8)?;
    if magic != MAGIC {
        return Err(NumericsError::Format("bad magic".into()));
    }
    let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(NumericsError::Format(format!("unsupported version {version}")));
    }
    let dtype = cur.take(1)?[0];
    if dtype != DTYPE_F64 {
        return Err(NumericsError::Format(format!("unsupported dtype code {dtype}")));
    }
    let rank = cur.take(1)?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        shape.push(usize::try_from(d).map_err(|_| NumericsError::Format("extent overflow".into()))?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| NumericsError::Format("element count overflow".into()))?;
    let payload = cur.take(n.checked_mul(8).ok_or_else(|| NumericsError::Format("payload overflow".into()))?)?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let t = Tensor::new(shape, data).map_err(|e| NumericsError::Format(e.to_string()))?;
    Ok((t, cur.pos))
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let (t, used) = decode(&bytes)?;
    if used != bytes.len() {
        return Err(NumericsError::Corrupt(format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(t)
}

pub fn save(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t)?)?;
    Ok(())
}

/// Loads a tensor file; errors name the file.
pub fn load(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    match decode(&bytes) {
        Ok((t, used)) if used == bytes.len() => Ok(t),
        Ok((_, used)) => Err(NumericsError::Corrupt(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - used
        ))),
        Err(NumericsError::Corrupt(msg)) => {
            Err(NumericsError::Corrupt(format!("{}: {msg}", path.display())))
        }
        Err(NumericsError::Format(msg)) => {
            Err(NumericsError::Format(format!("{}: {msg}", path.display())))
        }
        Err(e) => Err(e),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            NumericsError::Corrupt(format!(
                "truncated: needed {n} bytes at offset {}, {} available",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}
