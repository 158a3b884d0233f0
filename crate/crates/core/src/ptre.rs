//! Conversions between 2-D feature maps, pixel-token sequences, and
//! patch-token sequences.
//!
//! Patch re-embedding is a pure reshuffle with no learned state. A map of
//! `H×W×d` becomes `(H/p)(W/p)` tokens of width `p²·d`: patches are taken in
//! raster order, and inside a patch the values are laid out pixel-raster
//! major, channel minor.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `N×D` tokens that remember the `h×w` grid they were flattened from.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    data: Tensor,
    h: usize,
    w: usize,
}

impl TokenSequence {
    pub fn new(data: Tensor, h: usize, w: usize) -> Result<Self> {
        let (n, _) = data.dims2()?;
        if h * w != n {
            return Err(Error::Geometry { h, w, n });
        }
        Ok(Self { data, h, w })
    }

    pub fn n_tokens(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// Same grid, new token payload (for example after a projection).
    pub fn with_tensor(&self, data: Tensor) -> Result<Self> {
        Self::new(data, self.h, self.w)
    }

    pub fn add(&self, rhs: &TokenSequence) -> Result<Self> {
        if self.grid() != rhs.grid() {
            return Err(Error::ShapeMismatch {
                op: "token add",
                lhs: vec![self.h, self.w],
                rhs: vec![rhs.h, rhs.w],
            });
        }
        self.with_tensor(self.data.add(&rhs.data)?)
    }
}

/// Patch tokens plus the metadata needed to fold them back.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTokenSequence {
    data: Tensor,
    patch: usize,
    origin_h: usize,
    origin_w: usize,
    channels: usize,
}

impl PatchTokenSequence {
    pub fn new(data: Tensor, patch: usize, origin_h: usize, origin_w: usize, channels: usize) -> Result<Self> {
        let (n, width) = data.dims2()?;
        if patch == 0 || !origin_h.is_multiple_of(patch) || !origin_w.is_multiple_of(patch) {
            return Err(Error::PatchDivisibility {
                h: origin_h,
                w: origin_w,
                p: patch,
            });
        }
        if n * patch * patch != origin_h * origin_w || width != channels * patch * patch {
            return Err(Error::InvalidShape {
                shape: data.shape().to_vec(),
                reason: format!("inconsistent with {origin_h}x{origin_w}x{channels} source at patch {patch}"),
            });
        }
        Ok(Self {
            data,
            patch,
            origin_h,
            origin_w,
            channels,
        })
    }

    pub fn n_patches(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn patch_side(&self) -> usize {
        self.patch
    }

    pub fn origin(&self) -> (usize, usize) {
        (self.origin_h, self.origin_w)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Grid of patches, `(H/p, W/p)`.
    pub fn patch_grid(&self) -> (usize, usize) {
        (self.origin_h / self.patch, self.origin_w / self.patch)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// Replaces the payload, keeping the fold metadata.
    pub fn with_tensor(&self, data: Tensor) -> Result<Self> {
        Self::new(data, self.patch, self.origin_h, self.origin_w, self.channels)
    }
}

/// Raster flattening: pixel `(i, j)` becomes token `i·W + j`.
pub fn flatten(map: &Tensor) -> Result<TokenSequence> {
    let (h, w, c) = map.dims3()?;
    TokenSequence::new(map.reshape(&[h * w, c])?, h, w)
}

pub fn unflatten(seq: &TokenSequence) -> Result<Tensor> {
    seq.data.reshape(&[seq.h, seq.w, seq.dim()])
}

pub fn to_patch_tokens(map: &Tensor, p: usize) -> Result<PatchTokenSequence> {
    let (h, w, d) = map.dims3()?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::PatchDivisibility { h, w, p });
    }
    let (gh, gw) = (h / p, w / p);
    let width = p * p * d;
    let src = map.data();
    let mut out = vec![0.0; h * w * d];
    for py in 0..gh {
        for px in 0..gw {
            let token = &mut out[(py * gw + px) * width..(py * gw + px + 1) * width];
            for iy in 0..p {
                for ix in 0..p {
                    let s = ((py * p + iy) * w + px * p + ix) * d;
                    let t = (iy * p + ix) * d;
                    token[t..t + d].copy_from_slice(&src[s..s + d]);
                }
            }
        }
    }
    PatchTokenSequence::new(Tensor::from_parts(vec![gh * gw, width], out), p, h, w, d)
}

pub fn from_patch_tokens(seq: &PatchTokenSequence) -> Result<Tensor> {
    // Re-validate: the payload may have been swapped after construction.
    let seq = PatchTokenSequence::new(seq.data.clone(), seq.patch, seq.origin_h, seq.origin_w, seq.channels)?;
    let (h, w, d, p) = (seq.origin_h, seq.origin_w, seq.channels, seq.patch);
    let (gh, gw) = (h / p, w / p);
    let width = p * p * d;
    let src = seq.data.data();
    let mut out = vec![0.0; h * w * d];
    for py in 0..gh {
        for px in 0..gw {
            let token = &src[(py * gw + px) * width..(py * gw + px + 1) * width];
            for iy in 0..p {
                for ix in 0..p {
                    let s = (iy * p + ix) * d;
                    let t = ((py * p + iy) * w + px * p + ix) * d;
                    out[t..t + d].copy_from_slice(&token[s..s + d]);
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![h, w, d], out))
}
