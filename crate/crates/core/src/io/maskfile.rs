//! Binary mask files: `GFIMASK1`, u32 LE height, u32 LE width, then
//! row-major f32 LE values.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::mask::SaliencyMask;

pub const MAGIC: &[u8; 8] = b"GFIMASK1";
const HEADER_LEN: usize = 16;

pub fn encode_mask(m: &SaliencyMask) -> Vec<u8> {
    let (h, w) = m.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * h * w);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for v in m.values().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_mask(bytes: &[u8]) -> Result<SaliencyMask> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a mask file (bad magic)".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (h, w) = (word(8), word(12));
    let want = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("mask dimensions overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != want {
        return Err(Error::Format(format!("mask payload has {} bytes, {h}x{w} needs {want}", payload.len())));
    }
    let values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    let grid = Array2::from_shape_vec((h, w), values).expect("length checked");
    SaliencyMask::from_f32(grid).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_mask(path: &Path, m: &SaliencyMask) -> Result<()> {
    std::fs::write(path, encode_mask(m))?;
    Ok(())
}

pub fn load_mask(path: &Path) -> Result<SaliencyMask> {
    decode_mask(&std::fs::read(path)?)
}
