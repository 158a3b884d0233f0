//! Dense row-major `f64` tensors of rank 1 to 4 and the numeric kernels the
//! decoder is built from.
//!
//! Feature maps are rank-3 `H×W×C` tensors (channels minor), token sequences
//! are rank-2 `N×D`. Every reduction accumulates in ascending index order, so
//! results are bit-reproducible.

use crate::error::{Error, Result};
use crate::instrument::{self, OpClass};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "rank must be between 1 and 4".into(),
        });
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be positive".into(),
        });
    }
    Ok(shape.iter().product())
}

impl Tensor {
    /// Builds a tensor, validating extents, element count and finiteness.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len = check_shape(shape)?;
        if data.len() != len {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("{} elements supplied, {len} required", data.len()),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let len = check_shape(shape)?;
        Self::new(shape, vec![value; len])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let len = check_shape(shape)?;
        Self::new(shape, (0..len).map(&mut f).collect())
    }

    /// `n×n` identity.
    pub fn eye(n: usize) -> Result<Self> {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    /// Internal constructor for kernels whose output is valid by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable element access. Callers must keep the values finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.same_shape("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    fn same_shape(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn expect_rank(&self, op: &'static str, rank: usize) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::Rank {
                op,
                expected: rank,
                shape: self.shape.clone(),
            });
        }
        Ok(())
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        self.expect_rank("dims2", 2)?;
        Ok((self.shape[0], self.shape[1]))
    }

    /// Height, width and channels of a rank-3 feature map.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        self.expect_rank("dims3", 3)?;
        Ok((self.shape[0], self.shape[1], self.shape[2]))
    }

    /// Matrix product `self · rhs`. Each output element accumulates its
    /// inner products in ascending inner index starting from `0.0`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.expect_rank("matmul", 2)?;
        rhs.expect_rank("matmul", 2)?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, p) = (rhs.shape[0], rhs.shape[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * p];
        for (i, row) in out.chunks_exact_mut(p).enumerate() {
            axpy_rows(row, &self.data[i * k..(i + 1) * k], &rhs.data, p);
        }
        instrument::add_macs((m * k * p) as u64, OpClass::Other);
        Ok(Tensor::from_parts(vec![m, p], out))
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        let (m, p) = self.dims2()?;
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            for j in 0..p {
                out[j * m + i] = self.data[i * p + j];
            }
        }
        Ok(Tensor::from_parts(vec![p, m], out))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (_, p) = self.dims2()?;
        let mut out = self.data.clone();
        for row in out.chunks_exact_mut(p) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| v.max(0.0))
    }

    /// Logistic sigmoid, evaluated in the branch that never overflows.
    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid)
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape("add", rhs)?;
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        ))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// Columns `start..start + width` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Tensor> {
        let (m, p) = self.dims2()?;
        if width == 0 || start + width > p {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("column slice {start}..{} out of range", start + width),
            });
        }
        let mut out = Vec::with_capacity(m * width);
        for row in self.data.chunks_exact(p) {
            out.extend_from_slice(&row[start..start + width]);
        }
        Ok(Tensor::from_parts(vec![m, width], out))
    }

    /// Concatenates tensors along the last axis; all leading extents must agree.
    pub fn concat_last(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::InvalidShape {
            shape: vec![],
            reason: "nothing to concatenate".into(),
        })?;
        let lead = &first.shape[..first.rank() - 1];
        for t in parts {
            if t.rank() != first.rank() || &t.shape[..t.rank() - 1] != lead {
                return Err(Error::ShapeMismatch {
                    op: "concat_last",
                    lhs: first.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
        }
        let widths: Vec<usize> = parts.iter().map(|t| *t.shape.last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (t, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&t.data[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(Tensor::from_parts(shape, out))
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `out[j] += Σ_t a[t]·b[t·n + j]`, accumulating `t` in ascending order
/// for every `j`. Four terms are folded per pass over `out`; each element
/// still receives them one at a time, so rounding matches a plain loop.
fn axpy_rows(out: &mut [f64], a: &[f64], b: &[f64], n: usize) {
    let out = &mut out[..n];
    let mut t = 0;
    while t + 4 <= a.len() {
        let (a0, a1, a2, a3) = (a[t], a[t + 1], a[t + 2], a[t + 3]);
        let b0 = &b[t * n..(t + 1) * n];
        let b1 = &b[(t + 1) * n..(t + 2) * n];
        let b2 = &b[(t + 2) * n..(t + 3) * n];
        let b3 = &b[(t + 3) * n..(t + 4) * n];
        for j in 0..n {
            out[j] = (((out[j] + a0 * b0[j]) + a1 * b1[j]) + a2 * b2[j]) + a3 * b3[j];
        }
        t += 4;
    }
    while t < a.len() {
        let at = a[t];
        for (o, &bv) in out.iter_mut().zip(&b[t * n..(t + 1) * n]) {
            *o += at * bv;
        }
        t += 1;
    }
}

/// 2-D cross-correlation (no kernel flip) with zero padding `(k-1)/2`, so
/// the spatial extent is preserved.
///
/// `x` is `H×W×Cin`, `kernel` is `Cout×Cin×k×k`, `bias` has `Cout` entries.
/// Each output element starts from its bias and accumulates over kernel
/// row, kernel column, then input channel, all ascending; taps that fall in
/// the padding are skipped.
pub fn conv2d(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (h, w, cin) = x.dims3()?;
    kernel.expect_rank("conv2d", 4)?;
    let (cout, kcin, kh, kw) = (kernel.shape[0], kernel.shape[1], kernel.shape[2], kernel.shape[3]);
    if kh != kw || !(kh == 1 || kh == 3) {
        return Err(Error::UnsupportedKernel(if kh != kw { kh.max(kw) } else { kh }));
    }
    if kcin != cin || bias.shape != [cout] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape.clone(),
            rhs: kernel.shape.clone(),
        });
    }
    let k = kh;
    let pad = (k - 1) / 2;

    // Repack to [ky][kx][ci][co] so the innermost loop runs over contiguous
    // output channels.
    let mut packed = vec![0.0; k * k * cin * cout];
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    packed[((ky * k + kx) * cin + ci) * cout + co] = kernel.data[((co * cin + ci) * k + ky) * k + kx];
                }
            }
        }
    }

    let mut out = vec![0.0; h * w * cout];
    let mut taps: u64 = 0;
    for y in 0..h {
        for xx in 0..w {
            let o = &mut out[(y * w + xx) * cout..(y * w + xx + 1) * cout];
            o.copy_from_slice(&bias.data);
            for ky in 0..k {
                let sy = y + ky;
                if sy < pad || sy - pad >= h {
                    continue;
                }
                let sy = sy - pad;
                for kx in 0..k {
                    let sx = xx + kx;
                    if sx < pad || sx - pad >= w {
                        continue;
                    }
                    let sx = sx - pad;
                    taps += 1;
                    let src = &x.data[(sy * w + sx) * cin..(sy * w + sx + 1) * cin];
                    let wbase = (ky * k + kx) * cin * cout;
                    axpy_rows(o, src, &packed[wbase..wbase + cin * cout], cout);
                }
            }
        }
    }
    instrument::add_macs(taps * (cin * cout) as u64, OpClass::Conv);
    Ok(Tensor::from_parts(vec![h, w, cout], out))
}

/// Inference-mode batch normalization over the last axis:
/// `(x - mean) / sqrt(var + eps) * gamma + beta`.
pub fn batch_norm_infer(
    x: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let c = *x.shape.last().unwrap();
    for p in [mean, var, gamma, beta] {
        if p.shape != [c] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm_infer",
                lhs: x.shape.clone(),
                rhs: p.shape.clone(),
            });
        }
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Config(format!("batch norm eps must be positive, got {eps}")));
    }
    if let Some((channel, &value)) = var.data.iter().enumerate().find(|(_, v)| **v < 0.0) {
        return Err(Error::NegativeVariance { channel, value });
    }
    let denom: Vec<f64> = var.data.iter().map(|v| (v + eps).sqrt()).collect();
    let mut out = x.data.clone();
    for px in out.chunks_exact_mut(c) {
        for (ch, v) in px.iter_mut().enumerate() {
            *v = (*v - mean.data[ch]) / denom[ch] * gamma.data[ch] + beta.data[ch];
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

/// Source sample positions for one axis under the half-pixel convention.
fn bilinear_taps(src: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..src * factor)
        .map(|d| {
            let pos = ((d as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    // Clamped to the endpoints so rounding never leaves [min(a,b), max(a,b)].
    (a + t * (b - a)).clamp(a.min(b), a.max(b))
}

/// Bilinear upsampling of an `H×W×C` map by an integer factor, using
/// half-pixel centres (`align_corners = false`) with edge clamping.
pub fn bilinear_upsample(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (h, w, c) = x.dims3()?;
    if factor == 0 {
        return Err(Error::ZeroFactor);
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let ys = bilinear_taps(h, factor);
    let xs = bilinear_taps(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; oh * ow * c];
    let at = |y: usize, xx: usize, ch: usize| x.data[(y * w + xx) * c + ch];
    for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
            let o = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            for (ch, v) in o.iter_mut().enumerate() {
                let top = lerp(at(y0, x0, ch), at(y0, x1, ch), tx);
                let bottom = lerp(at(y1, x0, ch), at(y1, x1, ch), tx);
                *v = lerp(top, bottom, ty);
            }
        }
    }
    Ok(Tensor::from_parts(vec![oh, ow, c], out))
}
