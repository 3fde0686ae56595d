//! `RMAP` relevance dumps: magic `RMAP`, u32 version, u32 rank, `rank` u32
//! dims, then the row-major f32 payload. All integers and floats little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"RMAP";
pub const VERSION: u32 = 1;

pub fn encode_relevance(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.dims().len() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_relevance(bytes: &[u8]) -> Result<Tensor> {
    let bad = |msg: &str| Error::InvalidArgument(format!("relevance dump: {msg}"));
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| bad("truncated header"))
    };
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(bad("missing RMAP magic"));
    }
    let version = word(4)?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let rank = word(8)? as usize;
    let dims = (0..rank)
        .map(|k| word(12 + 4 * k).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let shape = Shape::new(dims)?;
    let start = 12 + 4 * rank;
    let payload = &bytes[start.min(bytes.len())..];
    if payload.len() != 4 * shape.numel() {
        return Err(bad(&format!(
            "payload is {} bytes, shape {shape} needs {}",
            payload.len(),
            4 * shape.numel()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_relevance_dump(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_relevance(t)).map_err(|e| Error::io(path, e))
}

pub fn read_relevance_dump(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    decode_relevance(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
