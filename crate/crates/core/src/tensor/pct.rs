//! `PCT1` binary tensor files.
//!
//! Layout: the four bytes `PCT1`, a `u8` rank, `rank` little-endian `u32`
//! dimensions, then `product(dims)` little-endian IEEE-754 `f32` values.

use std::fs;
use std::path::Path;

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PCT1";

pub fn encode<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    let fmt = |offset: usize, detail: String| Error::Format {
        what: "PCT1 tensor",
        offset,
        detail,
    };
    if bytes.len() < 5 || &bytes[..4] != MAGIC {
        return Err(fmt(0, "missing PCT1 magic".into()));
    }
    let rank = bytes[4] as usize;
    if rank == 0 {
        return Err(fmt(4, "rank 0".into()));
    }
    let header = 5 + 4 * rank;
    if bytes.len() < header {
        return Err(fmt(bytes.len(), format!("header truncated, need {header} bytes")));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 5 + 4 * i;
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        if d == 0 {
            return Err(fmt(off, "zero dimension".into()));
        }
        shape.push(d);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| fmt(5, "dimension product overflows".into()))?;
    let expect = header + 4 * n;
    if bytes.len() != expect {
        return Err(fmt(
            bytes.len().min(expect),
            format!("payload is {} bytes, expected {}", bytes.len() - header, 4 * n),
        ));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

pub fn write<T: Real>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
