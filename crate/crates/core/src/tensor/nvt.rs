//! `.nvt` raw tensor files: `NVT1`, u32 rank, u64 extents, then row-major
//! little-endian f32 values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{numel, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NVT1";

pub fn encode(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    let corrupt = |m: &str| Error::Corruption(format!("nvt: {m}"));
    let mut r = bytes;
    let mut head = [0u8; 4];
    r.read_exact(&mut head).map_err(|_| corrupt("truncated header"))?;
    if &head != MAGIC {
        return Err(corrupt("bad magic"));
    }
    r.read_exact(&mut head).map_err(|_| corrupt("truncated rank"))?;
    let rank = u32::from_le_bytes(head) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut e = [0u8; 8];
        r.read_exact(&mut e).map_err(|_| corrupt("truncated extents"))?;
        shape.push(usize::try_from(u64::from_le_bytes(e)).map_err(|_| corrupt("extent overflow"))?);
    }
    let n = numel(&shape);
    if r.len() != 4 * n {
        return Err(corrupt(&format!("payload holds {} bytes, expected {}", r.len(), 4 * n)));
    }
    let data = r.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::from_vec(data, &shape)
}

pub fn save(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode(&fs::read(path)?)
}
