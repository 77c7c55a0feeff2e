//! Raw tensor files: `b"EPSG"`, little-endian `u32` rank, `rank` little-endian
//! `u32` dims, then the values as little-endian `f32` in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EPSG";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.shape().len() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err("missing EPSG magic".into());
    }
    let word = |i: usize| -> std::result::Result<u32, String> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| "truncated header".to_string())
    };
    let rank = word(4)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for k in 0..rank {
        shape.push(word(8 + 4 * k)? as usize);
    }
    let offset = 8 + 4 * rank;
    let n: usize = shape.iter().product();
    let body = &bytes[offset..];
    if body.len() != 4 * n {
        return Err(format!(
            "shape {shape:?} needs {} payload bytes, found {}",
            4 * n,
            body.len()
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::TensorFormat {
        path: path.to_path_buf(),
        reason,
    })
}
