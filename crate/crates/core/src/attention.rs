//! Patch-wise view-mixed multi-head attention.
//!
//! Each head projects its query source and its key/value source to width
//! `D/N_h`. The spatial branch folds Q, K and V into patch tokens, runs
//! scaled dot-product attention over the `N/p²` patch tokens, and unfolds the
//! result. The channel branch attends over the `D/N_h` channels of the
//! unpatched head (`softmax(QᵀK / √N) · Vᵀ`, transposed back). Heads are
//! concatenated and projected by `W_s` and `W_c` respectively, and the two
//! views are mixed as `α·Z_s + β·Z_c`.
//!
//! Self-attention passes the same sequence as both sources; cross-attention
//! draws queries from one modality and keys/values from the other.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::instrument::{self, OpClass};
use crate::ptre::{self, TokenSequence};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    /// Per-head query projections, each `D×(D/N_h)`.
    pub w_q: Vec<Tensor>,
    pub w_k: Vec<Tensor>,
    pub w_v: Vec<Tensor>,
    /// Spatial-view output projection, `D×D`.
    pub w_s: Tensor,
    /// Channel-view output projection, `D×D`.
    pub w_c: Tensor,
    /// Spatial mixing weight α ∈ [0, 1].
    pub alpha: f64,
    /// Channel mixing weight β ∈ [0, 1].
    pub beta: f64,
}

impl AttentionParams {
    /// All projections zero, α = β = 0.5.
    pub fn zeros(dim: usize, heads: usize, patch: usize) -> Result<Self> {
        check_heads(dim, heads, patch)?;
        let dh = dim / heads;
        let per_head = || -> Result<Vec<Tensor>> { (0..heads).map(|_| Tensor::zeros(&[dim, dh])).collect() };
        Ok(Self {
            dim,
            heads,
            patch,
            w_q: per_head()?,
            w_k: per_head()?,
            w_v: per_head()?,
            w_s: Tensor::zeros(&[dim, dim])?,
            w_c: Tensor::zeros(&[dim, dim])?,
            alpha: 0.5,
            beta: 0.5,
        })
    }

    /// Uniform(−1/√D, 1/√D) projections, α = β = 0.5.
    pub fn random(dim: usize, heads: usize, patch: usize, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::zeros(dim, heads, patch)?;
        let bound = 1.0 / (dim as f64).sqrt();
        for t in p.tensors_mut() {
            *t = rng.uniform_tensor(t.shape(), bound)?;
        }
        Ok(p)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.w_q
            .iter_mut()
            .chain(self.w_k.iter_mut())
            .chain(self.w_v.iter_mut())
            .chain([&mut self.w_s, &mut self.w_c])
    }

    pub fn validate(&self) -> Result<()> {
        check_heads(self.dim, self.heads, self.patch)?;
        let dh = self.head_dim();
        for (name, list) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v)] {
            if list.len() != self.heads {
                return Err(Error::AttentionParams(format!(
                    "{name} holds {} heads, expected {}",
                    list.len(),
                    self.heads
                )));
            }
            if let Some(bad) = list.iter().find(|t| t.shape() != [self.dim, dh]) {
                return Err(Error::AttentionParams(format!(
                    "{name} head has extents {:?}, expected [{}, {dh}]",
                    bad.shape(),
                    self.dim
                )));
            }
        }
        for (name, t) in [("w_s", &self.w_s), ("w_c", &self.w_c)] {
            if t.shape() != [self.dim, self.dim] {
                return Err(Error::AttentionParams(format!(
                    "{name} has extents {:?}, expected [{d}, {d}]",
                    t.shape(),
                    d = self.dim
                )));
            }
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::AttentionParams(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

fn check_heads(dim: usize, heads: usize, patch: usize) -> Result<()> {
    if dim == 0 || heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::AttentionParams(format!(
            "dim {dim} is not a positive multiple of {heads} heads"
        )));
    }
    if patch == 0 {
        return Err(Error::AttentionParams("patch side must be positive".into()));
    }
    Ok(())
}

/// One head's projected query, key and value, each `N×(D/N_h)`, together
/// with the `h×w` grid of the tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadState {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub h: usize,
    pub w: usize,
}

impl HeadState {
    pub fn new(q: Tensor, k: Tensor, v: Tensor, h: usize, w: usize) -> Result<Self> {
        let (n, d) = q.dims2()?;
        for t in [&k, &v] {
            if t.shape() != q.shape() {
                return Err(Error::ShapeMismatch {
                    op: "head state",
                    lhs: q.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        if h * w != n || d == 0 {
            return Err(Error::Geometry { h, w, n });
        }
        Ok(Self { q, k, v, h, w })
    }

    pub fn n_tokens(&self) -> usize {
        self.q.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.q.shape()[1]
    }

    /// √(D/N_h), the pixel-token spatial scale.
    pub fn scale_spatial(&self) -> f64 {
        (self.head_dim() as f64).sqrt()
    }

    /// √N, the channel scale.
    pub fn scale_channel(&self) -> f64 {
        (self.n_tokens() as f64).sqrt()
    }
}

thread_local! {
    static SCALE_FAULT: Cell<bool> = const { Cell::new(false) };
}

/// Test hook: inside `f`, the spatial branch on this thread multiplies its
/// logits by the scale instead of dividing. Used to prove that the
/// verification suite detects a wrong scale.
pub fn with_spatial_scale_fault<R>(f: impl FnOnce() -> R) -> R {
    let prev = SCALE_FAULT.with(|c| c.replace(true));
    let out = f();
    SCALE_FAULT.with(|c| c.set(prev));
    out
}

fn spatial_scale(width: usize) -> f64 {
    let s = (width as f64).sqrt();
    if SCALE_FAULT.with(Cell::get) {
        1.0 / s
    } else {
        s
    }
}

/// `softmax(q·kᵀ / scale)` and its product with `v`.
fn scaled_dot_product(q: &Tensor, k: &Tensor, v: &Tensor, scale: f64) -> Result<(Tensor, Tensor)> {
    let logits = q.matmul(&k.transpose2d()?)?.map(|x| x / scale);
    let weights = logits.softmax_rows()?;
    let out = weights.matmul(v)?;
    Ok((out, weights))
}

pub fn project_heads(x_q: &TokenSequence, x_kv: &TokenSequence, params: &AttentionParams) -> Result<Vec<HeadState>> {
    check_sources(x_q, x_kv, params)?;
    let (h, w) = x_q.grid();
    instrument::with_class(OpClass::Projection, || {
        (0..params.heads)
            .map(|i| {
                HeadState::new(
                    x_q.tensor().matmul(&params.w_q[i])?,
                    x_kv.tensor().matmul(&params.w_k[i])?,
                    x_kv.tensor().matmul(&params.w_v[i])?,
                    h,
                    w,
                )
            })
            .collect()
    })
}

fn check_sources(x_q: &TokenSequence, x_kv: &TokenSequence, params: &AttentionParams) -> Result<()> {
    params.validate()?;
    for x in [x_q, x_kv] {
        if x.dim() != params.dim {
            return Err(Error::ShapeMismatch {
                op: "attention input",
                lhs: x.tensor().shape().to_vec(),
                rhs: vec![x.n_tokens(), params.dim],
            });
        }
    }
    if x_q.grid() != x_kv.grid() {
        let (a, b) = (x_q.grid(), x_kv.grid());
        return Err(Error::ShapeMismatch {
            op: "attention sources",
            lhs: vec![a.0, a.1],
            rhs: vec![b.0, b.1],
        });
    }
    Ok(())
}

/// Pixel-token attention `softmax(Q·Kᵀ / √(D/N_h))·V`.
pub fn spatial_head_attention(head: &HeadState) -> Result<Tensor> {
    let (out, _) = instrument::with_class(OpClass::SpatialCore, || {
        scaled_dot_product(&head.q, &head.k, &head.v, spatial_scale(head.head_dim()))
    })?;
    Ok(out)
}

/// Channel-view attention: `softmax(Qᵀ·K / √N)·Vᵀ`, transposed back to `N×(D/N_h)`.
pub fn channel_head_attention(head: &HeadState) -> Result<Tensor> {
    Ok(channel_core(head)?.0)
}

fn channel_core(head: &HeadState) -> Result<(Tensor, Tensor)> {
    let dh = head.head_dim();
    instrument::add_mem(OpClass::ChannelCore, (dh * dh) as u64);
    instrument::with_class(OpClass::ChannelCore, || {
        let (yt, weights) = scaled_dot_product(
            &head.q.transpose2d()?,
            &head.k.transpose2d()?,
            &head.v.transpose2d()?,
            head.scale_channel(),
        )?;
        Ok((yt.transpose2d()?, weights))
    })
}

/// Spatial attention over `p×p` patch tokens. The scale is the square root
/// of the patch-token width, `√((D/N_h)·p²)`, which reduces to the pixel
/// scale at `p = 1`.
pub fn patchwise_spatial_head_attention(head: &HeadState, p: usize) -> Result<Tensor> {
    Ok(patchwise_core(head, p)?.0)
}

fn patchwise_core(head: &HeadState, p: usize) -> Result<(Tensor, Tensor)> {
    let dh = head.head_dim();
    let fold = |t: &Tensor| -> Result<ptre::PatchTokenSequence> {
        ptre::to_patch_tokens(&t.reshape(&[head.h, head.w, dh])?, p)
    };
    let (q, k, v) = (fold(&head.q)?, fold(&head.k)?, fold(&head.v)?);
    let n_patches = q.n_patches();
    instrument::add_mem(OpClass::SpatialCore, (n_patches * n_patches) as u64);
    let (out, weights) = instrument::with_class(OpClass::SpatialCore, || {
        scaled_dot_product(q.tensor(), k.tensor(), v.tensor(), spatial_scale(q.dim()))
    })?;
    let map = ptre::from_patch_tokens(&v.with_tensor(out)?)?;
    Ok((map.reshape(&[head.n_tokens(), dh])?, weights))
}

/// Both branches of a view-mixed attention before mixing.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewOutputs {
    /// `[patch-wise spatial heads] · W_s`
    pub spatial: Tensor,
    /// `[channel heads] · W_c`
    pub channel: Tensor,
}

pub fn view_branches(x_q: &TokenSequence, x_kv: &TokenSequence, params: &AttentionParams) -> Result<ViewOutputs> {
    let heads = project_heads(x_q, x_kv, params)?;
    let capture = instrument::capturing();
    let mut spatial_heads = Vec::with_capacity(heads.len());
    let mut channel_heads = Vec::with_capacity(heads.len());
    let mut spatial_maps = Vec::new();
    let mut channel_maps = Vec::new();
    for head in &heads {
        let (s, s_map) = patchwise_core(head, params.patch)?;
        let (c, c_map) = channel_core(head)?;
        spatial_heads.push(s);
        channel_heads.push(c);
        if capture {
            spatial_maps.push(s_map);
            channel_maps.push(c_map);
        }
    }
    if capture {
        let (h, w) = x_q.grid();
        instrument::push_capture(spatial_maps, channel_maps, (h / params.patch, w / params.patch));
    }
    let (spatial, channel) = instrument::with_class(OpClass::Projection, || -> Result<_> {
        let s = Tensor::concat_last(&spatial_heads.iter().collect::<Vec<_>>())?.matmul(&params.w_s)?;
        let c = Tensor::concat_last(&channel_heads.iter().collect::<Vec<_>>())?.matmul(&params.w_c)?;
        Ok((s, c))
    })?;
    let n = x_q.n_tokens();
    instrument::add_mem(OpClass::Other, (2 * n * params.dim) as u64);
    instrument::log_attention(n, params.dim, params.heads, params.patch);
    Ok(ViewOutputs { spatial, channel })
}

/// `α·Z_s + β·Z_c`, queries from `x_q`, keys and values from `x_kv`.
pub fn view_mixed_attention(
    x_q: &TokenSequence,
    x_kv: &TokenSequence,
    params: &AttentionParams,
) -> Result<TokenSequence> {
    let v = view_branches(x_q, x_kv, params)?;
    let z = v.spatial.scale(params.alpha).add(&v.channel.scale(params.beta))?;
    x_q.with_tensor(z)
}

/// Per-head softmax matrices of both views, for inspection and export.
pub fn attention_maps(
    x_q: &TokenSequence,
    x_kv: &TokenSequence,
    params: &AttentionParams,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let heads = project_heads(x_q, x_kv, params)?;
    let mut spatial = Vec::new();
    let mut channel = Vec::new();
    for head in &heads {
        spatial.push(patchwise_core(head, params.patch)?.1);
        channel.push(channel_core(head)?.1);
    }
    Ok((spatial, channel))
}

/// Plain pixel-token multi-head attention, `[heads]·W_s` with no channel
/// view and no patching. This is the baseline the cost model compares to.
pub fn standard_attention(x: &TokenSequence, params: &AttentionParams) -> Result<TokenSequence> {
    let heads = project_heads(x, x, params)?;
    let n = x.n_tokens();
    let mut outs = Vec::with_capacity(heads.len());
    for head in &heads {
        instrument::add_mem(OpClass::SpatialCore, (n * n) as u64);
        outs.push(spatial_head_attention(head)?);
    }
    let z = instrument::with_class(OpClass::Projection, || {
        Tensor::concat_last(&outs.iter().collect::<Vec<_>>())?.matmul(&params.w_s)
    })?;
    instrument::add_mem(OpClass::Other, (n * params.dim) as u64);
    x.with_tensor(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(h: usize, w: usize, d: usize, rng: &mut Rng) -> TokenSequence {
        TokenSequence::new(rng.normal_tensor(&[h * w, d]).unwrap(), h, w).unwrap()
    }

    fn head(h: usize, w: usize, d: usize, seed: u64) -> HeadState {
        let mut rng = Rng::new(seed);
        let mut t = || rng.normal_tensor(&[h * w, d]).unwrap();
        HeadState::new(t(), t(), t(), h, w).unwrap()
    }

    /// Explicit three-step reference: logits, softmax, weighted sum.
    #[allow(clippy::too_many_arguments)]
    fn three_step(q: &[f64], k: &[f64], v: &[f64], n: usize, m: usize, d: usize, dv: usize, scale: f64) -> Vec<f64> {
        let mut out = vec![0.0; n * dv];
        for i in 0..n {
            let logits: Vec<f64> = (0..m)
                .map(|j| (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() / scale)
                .collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..m {
                for c in 0..dv {
                    out[i * dv + c] += e[j] / z * v[j * dv + c];
                }
            }
        }
        out
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn params_validation() {
        assert!(AttentionParams::zeros(6, 4, 1).is_err());
        assert!(AttentionParams::zeros(8, 2, 0).is_err());
        let mut p = AttentionParams::zeros(8, 2, 1).unwrap();
        assert!(p.validate().is_ok());
        p.alpha = 1.5;
        assert!(p.validate().is_err());
        let mut p = AttentionParams::zeros(8, 2, 1).unwrap();
        p.w_q.pop();
        assert!(p.validate().is_err());
    }

    #[test]
    fn identity_projection_slices_heads() {
        let mut rng = Rng::new(1);
        let x = seq(2, 3, 4, &mut rng);
        let mut p = AttentionParams::zeros(4, 2, 1).unwrap();
        for hd in 0..2 {
            for c in 0..2 {
                for w in [&mut p.w_q, &mut p.w_k, &mut p.w_v] {
                    w[hd].data_mut()[(hd * 2 + c) * 2 + c] = 1.0;
                }
            }
        }
        let heads = project_heads(&x, &x, &p).unwrap();
        for (hd, st) in heads.iter().enumerate() {
            let slice = x.tensor().slice_cols(hd * 2, 2).unwrap();
            assert_eq!(st.q, slice);
            assert_eq!(st.k, slice);
            assert_eq!(st.v, slice);
        }
        let zero = AttentionParams::zeros(4, 2, 1).unwrap();
        for st in project_heads(&x, &x, &zero).unwrap() {
            assert!(st.q.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn projection_matches_naive_multiply() {
        let mut rng = Rng::new(2);
        let x = seq(2, 2, 4, &mut rng);
        let p = AttentionParams::random(4, 2, 1, &mut rng).unwrap();
        let heads = project_heads(&x, &x, &p).unwrap();
        for (hd, st) in heads.iter().enumerate() {
            for i in 0..4 {
                for j in 0..2 {
                    let e: f64 = (0..4).fold(0.0, |acc, c| {
                        acc + x.tensor().data()[i * 4 + c] * p.w_q[hd].data()[c * 2 + j]
                    });
                    assert_eq!(st.q.data()[i * 2 + j], e);
                }
            }
        }
    }

    #[test]
    fn spatial_single_token_and_uniform() {
        let h1 = head(1, 1, 3, 3);
        assert_eq!(spatial_head_attention(&h1).unwrap(), h1.v);

        let mut h = head(2, 3, 2, 4);
        h.k = Tensor::zeros(&[6, 2]).unwrap();
        let out = spatial_head_attention(&h).unwrap();
        for c in 0..2 {
            let mean: f64 = (0..6).map(|j| h.v.data()[j * 2 + c]).sum::<f64>() / 6.0;
            for i in 0..6 {
                assert!((out.data()[i * 2 + c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spatial_matches_three_step() {
        let h = head(1, 5, 4, 5);
        let out = spatial_head_attention(&h).unwrap();
        let e = three_step(h.q.data(), h.k.data(), h.v.data(), 5, 5, 4, 4, 2.0);
        assert!(close(out.data(), &e, 1e-12));
    }

    #[test]
    fn channel_cases() {
        let h = head(2, 2, 1, 6);
        assert_eq!(channel_head_attention(&h).unwrap(), h.v);

        let mut h = head(2, 3, 3, 7);
        h.q = Tensor::zeros(&[6, 3]).unwrap();
        let out = channel_head_attention(&h).unwrap();
        for i in 0..6 {
            let mean: f64 = (0..3).map(|c| h.v.data()[i * 3 + c]).sum::<f64>() / 3.0;
            for c in 0..3 {
                assert!((out.data()[i * 3 + c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_matches_transpose_oracle() {
        let h = head(2, 3, 3, 8);
        let (n, d) = (6, 3);
        let tr = |t: &Tensor| -> Vec<f64> {
            (0..d)
                .flat_map(|c| (0..n).map(move |i| (c, i)))
                .map(|(c, i)| t.data()[i * d + c])
                .collect()
        };
        let yt = three_step(&tr(&h.q), &tr(&h.k), &tr(&h.v), d, d, n, n, (n as f64).sqrt());
        let out = channel_head_attention(&h).unwrap();
        for i in 0..n {
            for c in 0..d {
                assert!((out.data()[i * d + c] - yt[c * n + i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn patchwise_degenerate_cases() {
        let h = head(4, 4, 2, 9);
        assert_eq!(
            patchwise_spatial_head_attention(&h, 1).unwrap(),
            spatial_head_attention(&h).unwrap()
        );
        assert_eq!(patchwise_spatial_head_attention(&h, 4).unwrap(), h.v);
        assert!(matches!(
            patchwise_spatial_head_attention(&h, 3),
            Err(Error::PatchDivisibility { .. })
        ));
    }

    #[test]
    fn patchwise_matches_loop_built_oracle() {
        let (hh, ww, d, p) = (4, 4, 2, 2);
        let h = head(hh, ww, d, 10);
        let build = |t: &Tensor| -> Vec<f64> {
            let mut v = Vec::new();
            for py in 0..hh / p {
                for px in 0..ww / p {
                    for iy in 0..p {
                        for ix in 0..p {
                            let tok = (py * p + iy) * ww + px * p + ix;
                            v.extend_from_slice(&t.data()[tok * d..tok * d + d]);
                        }
                    }
                }
            }
            v
        };
        let width = d * p * p;
        let np = hh * ww / (p * p);
        let ot = three_step(
            &build(&h.q),
            &build(&h.k),
            &build(&h.v),
            np,
            np,
            width,
            width,
            (width as f64).sqrt(),
        );
        let out = patchwise_spatial_head_attention(&h, p).unwrap();
        // Unfold the oracle output by the same explicit loops.
        let mut e = vec![0.0; hh * ww * d];
        let mut it = ot.into_iter();
        for py in 0..hh / p {
            for px in 0..ww / p {
                for iy in 0..p {
                    for ix in 0..p {
                        let tok = (py * p + iy) * ww + px * p + ix;
                        for c in 0..d {
                            e[tok * d + c] = it.next().unwrap();
                        }
                    }
                }
            }
        }
        assert!(close(out.data(), &e, 1e-12));
    }

    #[test]
    fn mixing_isolates_branches() {
        let mut rng = Rng::new(11);
        let x = seq(4, 4, 8, &mut rng);
        let mut p = AttentionParams::random(8, 2, 2, &mut rng).unwrap();
        let b = view_branches(&x, &x, &p).unwrap();
        p.alpha = 1.0;
        p.beta = 0.0;
        assert_eq!(view_mixed_attention(&x, &x, &p).unwrap().tensor(), &b.spatial);
        p.alpha = 0.0;
        p.beta = 1.0;
        assert_eq!(view_mixed_attention(&x, &x, &p).unwrap().tensor(), &b.channel);
        p.alpha = 0.5;
        p.beta = 0.5;
        let mid = b.spatial.add(&b.channel).unwrap().scale(0.5);
        assert!(
            view_mixed_attention(&x, &x, &p)
                .unwrap()
                .tensor()
                .max_abs_diff(&mid)
                .unwrap()
                < 1e-12
        );
    }

    #[test]
    fn cross_sources_must_agree() {
        let mut rng = Rng::new(12);
        let a = seq(4, 4, 8, &mut rng);
        let b = seq(2, 8, 8, &mut rng);
        let c = seq(4, 4, 4, &mut rng);
        let p = AttentionParams::random(8, 2, 2, &mut rng).unwrap();
        assert!(view_mixed_attention(&a, &b, &p).is_err());
        assert!(view_mixed_attention(&a, &c, &p).is_err());
    }

    #[test]
    fn fault_hook_changes_spatial_output() {
        let h = head(4, 4, 4, 13);
        let good = spatial_head_attention(&h).unwrap();
        let bad = with_spatial_scale_fault(|| spatial_head_attention(&h).unwrap());
        assert!(good.max_abs_diff(&bad).unwrap() > 1e-6);
        assert_eq!(spatial_head_attention(&h).unwrap(), good);
    }

    #[test]
    fn captured_maps_are_row_stochastic() {
        let mut rng = Rng::new(14);
        let x = seq(4, 4, 8, &mut rng);
        let p = AttentionParams::random(8, 2, 2, &mut rng).unwrap();
        let ((), tally) = instrument::measure_capturing(Some("blk"), || {
            instrument::section("blk", || view_mixed_attention(&x, &x, &p).unwrap());
        });
        let cap = &tally.captures[0];
        assert_eq!(cap.spatial.len(), 2);
        assert_eq!(cap.spatial[0].shape(), &[4, 4]);
        assert_eq!(cap.channel[0].shape(), &[4, 4]);
        let (s, c) = attention_maps(&x, &x, &p).unwrap();
        assert_eq!(s, cap.spatial);
        assert_eq!(c, cap.channel);
    }
}
