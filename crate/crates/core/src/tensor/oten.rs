//! `OTEN` tensor files: magic `OTEN`, u32 version (1), u32 rank, rank × u64
//! dims, then the values as f32. Everything little-endian.

use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"OTEN";
pub const VERSION: u32 = 1;

pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let bad = |msg: &str| Error::Data(format!("OTEN: {msg}"));
    let take = |at: usize, n: usize| bytes.get(at..at + n).ok_or_else(|| bad("truncated"));
    if take(0, 4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(take(4, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let rank = u32::from_le_bytes(take(8, 4)?.try_into().unwrap()) as usize;
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let d = u64::from_le_bytes(take(12 + 8 * i, 8)?.try_into().unwrap());
        shape.push(usize::try_from(d).map_err(|_| bad("dimension overflow"))?);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("dimension overflow"))?;
    let start = 12 + 8 * rank;
    if bytes.len() != start + 4 * numel {
        return Err(bad("payload length does not match shape"));
    }
    let data = bytes[start..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(shape, data)
}

pub fn write(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
