//! `DVFL` flow cache files: magic, `u32` height, `u32` width, then
//! `H * W` interleaved `(u, v)` pairs as little-endian `f32`, row-major.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::FlowField;

pub const MAGIC: &[u8; 4] = b"DVFL";

pub fn encode(flow: &FlowField) -> Vec<u8> {
    let (h, w) = (flow.height(), flow.width());
    let plane = h * w;
    let d = flow.vectors.data();
    let mut out = Vec::with_capacity(12 + plane * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for p in 0..plane {
        out.extend_from_slice(&d[p].to_le_bytes());
        out.extend_from_slice(&d[plane + p].to_le_bytes());
    }
    out
}

/// Decodes the `2 x H x W` vectors. Frame indices are not stored.
pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a DVFL flow file".into()));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let plane = h * w;
    let expected = 12 + plane * 8;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "DVFL {h}x{w} needs {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let mut data = vec![0.0f32; 2 * plane];
    for (p, chunk) in bytes[12..].chunks_exact(8).enumerate() {
        data[p] = f32::from_le_bytes(chunk[..4].try_into().unwrap());
        data[plane + p] = f32::from_le_bytes(chunk[4..].try_into().unwrap());
    }
    Tensor::from_vec(&[2, h, w], data)
}

pub fn write(path: &Path, flow: &FlowField) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(flow)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path, source_index: i64, target_index: i64) -> Result<FlowField> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Ok(FlowField {
        vectors: decode(&bytes)?,
        source_index,
        target_index,
    })
}
