//! File formats: CAVR v1 tensors and binary 8-bit PGM images.
//!
//! CAVR v1 layout:
//!
//! ```text
//! offset  size    field
//! 0       4       magic "CAVR" (43 41 56 52)
//! 4       1       version = 1
//! 5       1       rank r, 1..=4
//! 6       4*r     extents, u32 little-endian
//! 6+4r    4*len   row-major values, IEEE-754 f32 little-endian
//! ```
//!
//! Values are widened to `f64` on read and rounded to nearest `f32` on write.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CAVR_MAGIC: [u8; 4] = *b"CAVR";
pub const CAVR_VERSION: u8 = 1;

pub fn encode_cavr(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(&CAVR_MAGIC);
    out.push(CAVR_VERSION);
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_cavr(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 6 || bytes[..4] != CAVR_MAGIC {
        return Err(Error::Cavr("bad magic".into()));
    }
    if bytes[4] != CAVR_VERSION {
        return Err(Error::Cavr(format!("unsupported version {}", bytes[4])));
    }
    let rank = bytes[5] as usize;
    if !(1..=4).contains(&rank) {
        return Err(Error::Cavr(format!("rank {rank} out of range")));
    }
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Cavr("truncated header".into()));
    }
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Cavr("element count overflows".into()))?;
    let body = &bytes[header..];
    if body.len() != len.saturating_mul(4) {
        return Err(Error::Cavr(format!(
            "payload holds {} bytes, extents {shape:?} need {}",
            body.len(),
            len.saturating_mul(4)
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(&shape, data).map_err(|e| Error::Cavr(e.to_string()))
}

pub fn read_cavr(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cavr(&bytes).map_err(|e| match e {
        Error::Cavr(msg) => Error::Cavr(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_cavr(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &encode_cavr(t))
}

/// Writes through a sibling temporary file and a rename, so readers never
/// observe a truncated file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = Path::new(&tmp);
    fs::write(tmp, bytes).map_err(|e| Error::io(tmp, e))?;
    fs::rename(tmp, path).map_err(|e| Error::io(path, e))
}

/// Binary PGM (P5, maxval 255) of a `rows×cols` grayscale raster.
pub fn encode_pgm(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), rows * cols);
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Maps `[0, 1]` values to gray levels by rounding `v * 255`.
pub fn unit_to_gray(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Min-max normalization to gray levels; a constant input maps to zeros.
pub fn minmax_to_gray(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|v| (((v - lo) / (hi - lo)) * 255.0).round() as u8)
        .collect()
}

/// Rows and columns of an image-like tensor: `R×C` or `R×C×1`.
fn raster_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] | [r, c, 1] => Ok((*r, *c)),
        other => Err(Error::InvalidShape {
            shape: other.to_vec(),
            reason: "expected a single-channel raster".into(),
        }),
    }
}

/// PGM of an `R×C` or `R×C×1` tensor holding values in `[0, 1]`.
pub fn pgm_unit(t: &Tensor) -> Result<Vec<u8>> {
    let (r, c) = raster_dims(t)?;
    Ok(encode_pgm(r, c, &unit_to_gray(t.data())))
}

/// PGM of an `R×C` or `R×C×1` tensor, min-max normalized.
pub fn pgm_minmax(t: &Tensor) -> Result<Vec<u8>> {
    let (r, c) = raster_dims(t)?;
    Ok(encode_pgm(r, c, &minmax_to_gray(t.data())))
}

pub fn write_pgm_unit(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &pgm_unit(t)?)
}

pub fn write_pgm_minmax(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &pgm_minmax(t)?)
}
