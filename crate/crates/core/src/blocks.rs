//! Pre-norm residual blocks: the self-attention block, the two-stream
//! cross-attention block, and the convolutional feed-forward network.

use crate::attention::{self, AttentionParams};
use crate::error::{Error, Result};
use crate::instrument;
use crate::ptre::{self, TokenSequence};
use crate::rng::Rng;
use crate::tensor::{self, Tensor};

pub const DEFAULT_BN_EPS: f64 = 1e-5;

/// Inference-mode batch-norm statistics and affine terms over `C` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub mean: Tensor,
    pub var: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl BatchNorm {
    /// mean 0, var 1, gamma 1, beta 0.
    pub fn identity(channels: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            mean: Tensor::zeros(&[channels])?,
            var: Tensor::full(&[channels], 1.0)?,
            gamma: Tensor::full(&[channels], 1.0)?,
            beta: Tensor::zeros(&[channels])?,
            eps,
        })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_map(&self, map: &Tensor) -> Result<Tensor> {
        tensor::batch_norm_infer(map, &self.mean, &self.var, &self.gamma, &self.beta, self.eps)
    }

    /// Normalizes tokens in their 2-D form and flattens back.
    pub fn apply_tokens(&self, x: &TokenSequence) -> Result<TokenSequence> {
        ptre::flatten(&self.apply_map(&ptre::unflatten(x)?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    /// tanh approximation
    Gelu,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Relu => x.relu(),
            Activation::Gelu => {
                x.map(|v| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh()))
            }
        }
    }
}

/// 3×3 conv → BN → activation → 1×1 conv.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvFfnParams {
    /// `Dh×Din×3×3`
    pub conv3_weight: Tensor,
    pub conv3_bias: Tensor,
    pub bn: BatchNorm,
    /// `Dout×Dh×1×1`
    pub conv1_weight: Tensor,
    pub conv1_bias: Tensor,
    pub activation: Activation,
}

impl ConvFfnParams {
    pub fn zeros(d_in: usize, hidden: usize, d_out: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            conv3_weight: Tensor::zeros(&[hidden, d_in, 3, 3])?,
            conv3_bias: Tensor::zeros(&[hidden])?,
            bn: BatchNorm::identity(hidden, eps)?,
            conv1_weight: Tensor::zeros(&[d_out, hidden, 1, 1])?,
            conv1_bias: Tensor::zeros(&[d_out])?,
            activation: Activation::Relu,
        })
    }

    pub fn random(d_in: usize, hidden: usize, d_out: usize, eps: f64, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::zeros(d_in, hidden, d_out, eps)?;
        let s3 = 1.0 / ((d_in * 9) as f64).sqrt();
        let s1 = 1.0 / (hidden as f64).sqrt();
        p.conv3_weight = rng.uniform_tensor(p.conv3_weight.shape(), s3)?;
        p.conv3_bias = rng.uniform_tensor(p.conv3_bias.shape(), s3)?;
        p.conv1_weight = rng.uniform_tensor(p.conv1_weight.shape(), s1)?;
        p.conv1_bias = rng.uniform_tensor(p.conv1_bias.shape(), s1)?;
        Ok(p)
    }

    pub fn d_in(&self) -> usize {
        self.conv3_weight.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.conv3_weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.conv1_weight.shape()[0]
    }
}

pub fn conv_ffn(x: &Tensor, params: &ConvFfnParams) -> Result<Tensor> {
    let (_, _, c) = x.dims3()?;
    if c != params.d_in() {
        return Err(Error::ShapeMismatch {
            op: "conv_ffn",
            lhs: x.shape().to_vec(),
            rhs: params.conv3_weight.shape().to_vec(),
        });
    }
    let h = tensor::conv2d(x, &params.conv3_weight, &params.conv3_bias)?;
    let h = params.activation.apply(&params.bn.apply_map(&h)?);
    tensor::conv2d(&h, &params.conv1_weight, &params.conv1_bias)
}

fn conv_ffn_tokens(x: &TokenSequence, params: &ConvFfnParams) -> Result<TokenSequence> {
    ptre::flatten(&conv_ffn(&ptre::unflatten(x)?, params)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttentionBlockParams {
    pub norm1: BatchNorm,
    pub attn: AttentionParams,
    pub norm2: BatchNorm,
    pub ffn: ConvFfnParams,
}

impl SelfAttentionBlockParams {
    /// Zero projections and convolutions, identity norms, α = β = 0.5.
    pub fn zeros(dim: usize, heads: usize, patch: usize, hidden: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            norm1: BatchNorm::identity(dim, eps)?,
            attn: AttentionParams::zeros(dim, heads, patch)?,
            norm2: BatchNorm::identity(dim, eps)?,
            ffn: ConvFfnParams::zeros(dim, hidden, dim, eps)?,
        })
    }

    pub fn random(dim: usize, heads: usize, patch: usize, hidden: usize, eps: f64, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            norm1: BatchNorm::identity(dim, eps)?,
            attn: AttentionParams::random(dim, heads, patch, rng)?,
            norm2: BatchNorm::identity(dim, eps)?,
            ffn: ConvFfnParams::random(dim, hidden, dim, eps, rng)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.attn.dim
    }
}

/// `x₁ = VMA(Norm₁(x)) + x`, then `ConvFFN(Norm₂(x₁)) + x₁`.
pub fn self_attention_block(x: &TokenSequence, params: &SelfAttentionBlockParams) -> Result<TokenSequence> {
    if x.dim() != params.dim() || params.ffn.d_in() != params.dim() || params.ffn.d_out() != params.dim() {
        return Err(Error::ShapeMismatch {
            op: "self_attention_block",
            lhs: x.tensor().shape().to_vec(),
            rhs: vec![x.n_tokens(), params.dim()],
        });
    }
    let n = params.norm1.apply_tokens(x)?;
    let x1 = attention::view_mixed_attention(&n, &n, &params.attn)?.add(x)?;
    let n2 = params.norm2.apply_tokens(&x1)?;
    let out = conv_ffn_tokens(&n2, &params.ffn)?.add(&x1)?;
    instrument::trace_shape(&shape3(x), &shape3(&out));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionBlockParams {
    pub norm_rgb: BatchNorm,
    pub norm_dt: BatchNorm,
    /// Queries from the RGB stream, keys/values from depth/thermal.
    pub attn_rgb: AttentionParams,
    /// Queries from depth/thermal, keys/values from RGB.
    pub attn_dt: AttentionParams,
    /// Over the `2D` concatenated channels.
    pub norm_fused: BatchNorm,
    /// `2D → D`
    pub ffn: ConvFfnParams,
}

impl CrossAttentionBlockParams {
    pub fn zeros(dim: usize, heads: usize, patch: usize, hidden: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            norm_rgb: BatchNorm::identity(dim, eps)?,
            norm_dt: BatchNorm::identity(dim, eps)?,
            attn_rgb: AttentionParams::zeros(dim, heads, patch)?,
            attn_dt: AttentionParams::zeros(dim, heads, patch)?,
            norm_fused: BatchNorm::identity(2 * dim, eps)?,
            ffn: ConvFfnParams::zeros(2 * dim, hidden, dim, eps)?,
        })
    }

    pub fn random(dim: usize, heads: usize, patch: usize, hidden: usize, eps: f64, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            norm_rgb: BatchNorm::identity(dim, eps)?,
            norm_dt: BatchNorm::identity(dim, eps)?,
            attn_rgb: AttentionParams::random(dim, heads, patch, rng)?,
            attn_dt: AttentionParams::random(dim, heads, patch, rng)?,
            norm_fused: BatchNorm::identity(2 * dim, eps)?,
            ffn: ConvFfnParams::random(2 * dim, hidden, dim, eps, rng)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.attn_rgb.dim
    }
}

/// Section labels of the two attention streams inside a cross block.
pub const RGB_QUERY: &str = "rgb_query";
pub const DT_QUERY: &str = "dt_query";

/// Two-stream cross attention. Each stream is pre-normalized by its own
/// norm; `Z_rgb` attends from RGB queries into depth/thermal keys and
/// values, `Z_dt` the other way round. The output is
/// `Z_rgb + Z_dt + ConvFFN(Norm([Z_rgb, Z_dt]))`.
pub fn cross_attention_block(
    f_rgb: &TokenSequence,
    f_dt: &TokenSequence,
    params: &CrossAttentionBlockParams,
) -> Result<TokenSequence> {
    let d = params.dim();
    if f_rgb.grid() != f_dt.grid() || f_rgb.dim() != d || f_dt.dim() != d {
        return Err(Error::ShapeMismatch {
            op: "cross_attention_block",
            lhs: f_rgb.tensor().shape().to_vec(),
            rhs: f_dt.tensor().shape().to_vec(),
        });
    }
    if params.attn_dt.dim != d || params.ffn.d_in() != 2 * d || params.ffn.d_out() != d {
        return Err(Error::AttentionParams(format!(
            "cross block expects attention width {d} and a {}→{d} FFN",
            2 * d
        )));
    }
    let n_rgb = params.norm_rgb.apply_tokens(f_rgb)?;
    let n_dt = params.norm_dt.apply_tokens(f_dt)?;
    let z_rgb = instrument::section(RGB_QUERY, || {
        attention::view_mixed_attention(&n_rgb, &n_dt, &params.attn_rgb)
    })?;
    let z_dt = instrument::section(DT_QUERY, || {
        attention::view_mixed_attention(&n_dt, &n_rgb, &params.attn_dt)
    })?;
    let (h, w) = f_rgb.grid();
    let cat = TokenSequence::new(Tensor::concat_last(&[z_rgb.tensor(), z_dt.tensor()])?, h, w)?;
    let fused = conv_ffn_tokens(&params.norm_fused.apply_tokens(&cat)?, &params.ffn)?;
    let out = z_rgb.add(&z_dt)?.add(&fused)?;
    instrument::trace_shape(&shape3(f_rgb), &shape3(&out));
    Ok(out)
}

fn shape3(x: &TokenSequence) -> [usize; 3] {
    let (h, w) = x.grid();
    [h, w, x.dim()]
}
