//! Binary tensor snapshots.
//!
//! Layout, all little-endian: magic `PTNS`, `u32` version, `u32` rank,
//! `rank` × `u64` dims, then the values as `f32`.

use std::io::{Read, Write};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PTNS";
pub const VERSION: u32 = 1;

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(12 + 8 * t.rank() + 4 * t.numel());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::new();
    write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let bad = |detail: &str| Error::Format {
        what: "tensor snapshot",
        path: Default::default(),
        detail: detail.to_string(),
    };
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("missing PTNS magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let rank = u32_at(8) as usize;
    let dims_end = 12 + 8 * rank;
    if bytes.len() < dims_end {
        return Err(bad("truncated dims"));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| {
            let o = 12 + 8 * i;
            u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap()) as usize
        })
        .collect();
    let n: usize = shape.iter().product();
    if bytes.len() != dims_end + 4 * n {
        return Err(bad(&format!(
            "expected {} data bytes, found {}",
            4 * n,
            bytes.len() - dims_end
        )));
    }
    let data = bytes[dims_end..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::io("<reader>", e))?;
    decode(&bytes)
}
