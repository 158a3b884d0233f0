//! The top-down decoder: four cascaded cross-modal integration units and
//! the saliency predictor.
//!
//! Level 1 is the finest (a quarter of the input resolution); each deeper
//! level halves the extents. Decoding runs level 4 → level 1, every unit
//! absorbing the upsampled output of the level below it in depth.

use std::path::Path;

use crate::blocks::{self, Activation, BatchNorm, CrossAttentionBlockParams, SelfAttentionBlockParams, DEFAULT_BN_EPS};
use crate::error::{Error, Result};
use crate::instrument;
use crate::io;
use crate::ptre;
use crate::rng::Rng;
use crate::tensor::{self, Tensor};

pub const LEVELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelSpec {
    pub h: usize,
    pub w: usize,
    /// Backbone channels entering this level's embedding layers.
    pub channels: usize,
    pub patch: usize,
}

impl LevelSpec {
    pub fn tokens(&self) -> usize {
        self.h * self.w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TippConfig {
    pub input_h: usize,
    pub input_w: usize,
    /// Embedding width D.
    pub dim: usize,
    pub heads: usize,
    /// Conv-FFN hidden width.
    pub ffn_hidden: usize,
    pub predictor_hidden: usize,
    pub bn_eps: f64,
    pub activation: Activation,
    /// Index 0 is level 1.
    pub levels: [LevelSpec; LEVELS],
}

impl Default for TippConfig {
    /// 256×256 input, ResNet stage widths, D = 64, two heads, patch 8 everywhere.
    fn default() -> Self {
        Self::new(256, 256, [256, 512, 1024, 2048], [8; LEVELS], 64, 2)
    }
}

impl TippConfig {
    /// Derives the pyramid (`input/4`, then halving) from the input extents.
    /// Extents that do not divide evenly round down; [`validate`] reports them.
    ///
    /// [`validate`]: TippConfig::validate
    pub fn new(
        input_h: usize,
        input_w: usize,
        channels: [usize; LEVELS],
        patches: [usize; LEVELS],
        dim: usize,
        heads: usize,
    ) -> Self {
        let levels = std::array::from_fn(|i| LevelSpec {
            h: input_h / (4 << i),
            w: input_w / (4 << i),
            channels: channels[i],
            patch: patches[i],
        });
        Self {
            input_h,
            input_w,
            dim,
            heads,
            ffn_hidden: dim,
            predictor_hidden: 32,
            bn_eps: DEFAULT_BN_EPS,
            activation: Activation::Relu,
            levels,
        }
    }

    /// 1-based level access.
    pub fn level(&self, level: usize) -> &LevelSpec {
        &self.levels[level - 1]
    }

    pub fn with_patches(mut self, patches: [usize; LEVELS]) -> Self {
        for (l, p) in self.levels.iter_mut().zip(patches) {
            l.patch = p;
        }
        self
    }

    pub fn patches(&self) -> [usize; LEVELS] {
        self.levels.map(|l| l.patch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.ffn_hidden == 0 || self.predictor_hidden == 0 {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if self.bn_eps.is_nan() || self.bn_eps <= 0.0 {
            return Err(Error::Config("bn_eps must be positive".into()));
        }
        for (i, l) in self.levels.iter().enumerate() {
            let level = i + 1;
            let (eh, ew) = if i == 0 {
                (self.input_h / 4, self.input_w / 4)
            } else {
                (self.levels[i - 1].h / 2, self.levels[i - 1].w / 2)
            };
            let (sh, sw) = if i == 0 {
                (self.input_h, self.input_w)
            } else {
                (self.levels[i - 1].h, self.levels[i - 1].w)
            };
            let factor = if i == 0 { 4 } else { 2 };
            if l.h == 0 || l.w == 0 || sh % factor != 0 || sw % factor != 0 || (l.h, l.w) != (eh, ew) {
                return Err(
                    Error::Config(format!("extents {}x{} are not 1/{factor} of {sh}x{sw}", l.h, l.w)).at_level(level),
                );
            }
            if l.channels == 0 {
                return Err(Error::Config("backbone channel count must be positive".into()).at_level(level));
            }
            if l.patch == 0 || l.h % l.patch != 0 || l.w % l.patch != 0 {
                return Err(Error::PatchDivisibility {
                    h: l.h,
                    w: l.w,
                    p: l.patch,
                }
                .at_level(level));
            }
        }
        Ok(())
    }
}

/// Backbone features of both modalities at one level, each `H×W×C`.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelFeatures {
    pub rgb: Tensor,
    pub dt: Tensor,
}

/// Index 0 is level 1.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<LevelFeatures>,
}

impl FeaturePyramid {
    /// Seeded standard-normal features matching the configured pyramid.
    pub fn synthetic(config: &TippConfig, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let levels = config
            .levels
            .iter()
            .map(|l| {
                let shape = [l.h, l.w, l.channels];
                Ok(LevelFeatures {
                    rgb: rng.normal_tensor(&shape)?,
                    dt: rng.normal_tensor(&shape)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { levels })
    }

    pub fn file_name(level: usize, modality: &str) -> String {
        format!("level{level}_{modality}.cavr")
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, l) in self.levels.iter().enumerate() {
            io::write_cavr(&dir.join(Self::file_name(i + 1, "rgb")), &l.rgb)?;
            io::write_cavr(&dir.join(Self::file_name(i + 1, "dt")), &l.dt)?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let levels = (1..=LEVELS)
            .map(|level| {
                let read = |m: &str| {
                    let path = dir.join(Self::file_name(level, m));
                    if !path.exists() {
                        return Err(Error::MissingTensor(Self::file_name(level, m)));
                    }
                    io::read_cavr(&path)
                };
                Ok(LevelFeatures {
                    rgb: read("rgb")?,
                    dt: read("dt")?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { levels })
    }

    fn validate(&self, config: &TippConfig) -> Result<()> {
        if self.levels.len() != LEVELS {
            return Err(Error::Config(format!(
                "expected {LEVELS} feature levels, got {}",
                self.levels.len()
            )));
        }
        for (i, (f, l)) in self.levels.iter().zip(&config.levels).enumerate() {
            let want = [l.h, l.w, l.channels];
            for t in [&f.rgb, &f.dt] {
                if t.shape() != want {
                    return Err(Error::ShapeMismatch {
                        op: "feature pyramid",
                        lhs: t.shape().to_vec(),
                        rhs: want.to_vec(),
                    }
                    .at_level(i + 1));
                }
            }
        }
        Ok(())
    }
}

/// One cross-modal integration unit.
#[derive(Debug, Clone, PartialEq)]
pub struct CmiuParams {
    /// `D×C×1×1` embedding of the RGB features.
    pub embed_rgb_weight: Tensor,
    pub embed_rgb_bias: Tensor,
    pub embed_dt_weight: Tensor,
    pub embed_dt_bias: Tensor,
    pub imsa_rgb: SelfAttentionBlockParams,
    pub imsa_dt: SelfAttentionBlockParams,
    pub imca: CrossAttentionBlockParams,
    pub cssa: SelfAttentionBlockParams,
}

impl CmiuParams {
    pub fn zeros(config: &TippConfig, level: usize) -> Result<Self> {
        let l = config.level(level);
        let (d, nh, p, hid, eps) = (config.dim, config.heads, l.patch, config.ffn_hidden, config.bn_eps);
        let mut out = Self {
            embed_rgb_weight: Tensor::zeros(&[d, l.channels, 1, 1])?,
            embed_rgb_bias: Tensor::zeros(&[d])?,
            embed_dt_weight: Tensor::zeros(&[d, l.channels, 1, 1])?,
            embed_dt_bias: Tensor::zeros(&[d])?,
            imsa_rgb: SelfAttentionBlockParams::zeros(d, nh, p, hid, eps)?,
            imsa_dt: SelfAttentionBlockParams::zeros(d, nh, p, hid, eps)?,
            imca: CrossAttentionBlockParams::zeros(d, nh, p, hid, eps)?,
            cssa: SelfAttentionBlockParams::zeros(d, nh, p, hid, eps)?,
        };
        out.imsa_rgb.ffn.activation = config.activation;
        out.imsa_dt.ffn.activation = config.activation;
        out.imca.ffn.activation = config.activation;
        out.cssa.ffn.activation = config.activation;
        Ok(out)
    }
}

/// Upsample ×4 → 3×3 conv → BN → activation → 1×1 conv → sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    pub conv3_weight: Tensor,
    pub conv3_bias: Tensor,
    pub bn: BatchNorm,
    pub conv1_weight: Tensor,
    pub conv1_bias: Tensor,
    pub activation: Activation,
}

impl PredictorParams {
    pub fn zeros(config: &TippConfig) -> Result<Self> {
        let (d, hid) = (config.dim, config.predictor_hidden);
        Ok(Self {
            conv3_weight: Tensor::zeros(&[hid, d, 3, 3])?,
            conv3_bias: Tensor::zeros(&[hid])?,
            bn: BatchNorm::identity(hid, config.bn_eps)?,
            conv1_weight: Tensor::zeros(&[1, hid, 1, 1])?,
            conv1_bias: Tensor::zeros(&[1])?,
            activation: config.activation,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TippWeights {
    /// Index 0 is level 1.
    pub cmius: Vec<CmiuParams>,
    pub predictor: PredictorParams,
}

impl TippWeights {
    /// Sets the patch size of every attention at each level.
    pub fn with_patches(mut self, patches: [usize; LEVELS]) -> Self {
        for (c, &p) in self.cmius.iter_mut().zip(&patches) {
            for a in [
                &mut c.imsa_rgb.attn,
                &mut c.imsa_dt.attn,
                &mut c.imca.attn_rgb,
                &mut c.imca.attn_dt,
                &mut c.cssa.attn,
            ] {
                a.patch = p;
            }
        }
        self
    }

    /// Zero convolutions and projections, identity norms, α = β = 0.5.
    pub fn zeros(config: &TippConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            cmius: (1..=LEVELS)
                .map(|l| CmiuParams::zeros(config, l))
                .collect::<Result<_>>()?,
            predictor: PredictorParams::zeros(config)?,
        })
    }
}

/// Single-channel saliency map, every value strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    values: Tensor,
}

/// Largest double below 1.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

impl SaliencyMap {
    /// Applies the sigmoid to `H×W×1` logits. Saturated results are pulled to
    /// the nearest representable values inside the open interval.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let (_, _, c) = logits.dims3()?;
        if c != 1 {
            return Err(Error::InvalidShape {
                shape: logits.shape().to_vec(),
                reason: "saliency logits must have one channel".into(),
            });
        }
        Ok(Self {
            values: logits.map(|v| tensor::sigmoid(v).clamp(f64::MIN_POSITIVE, BELOW_ONE)),
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.values.shape()[0], self.values.shape()[1])
    }
}

fn embed(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let out = tensor::conv2d(x, weight, bias)?;
    instrument::trace_shape(x.shape(), out.shape());
    Ok(out)
}

/// Embeds both modalities, refines each with its self-attention block, fuses
/// them with the cross block, adds the upsampled coarser output when there
/// is one, and finishes with the cross-scale self-attention block.
pub fn cmiu_forward(f_rgb: &Tensor, f_dt: &Tensor, f_prev: Option<&Tensor>, params: &CmiuParams) -> Result<Tensor> {
    let (h, w, _) = f_rgb.dims3()?;
    let (h2, w2, _) = f_dt.dims3()?;
    if (h, w) != (h2, w2) {
        return Err(Error::ShapeMismatch {
            op: "cmiu modalities",
            lhs: f_rgb.shape().to_vec(),
            rhs: f_dt.shape().to_vec(),
        });
    }
    let d = params.cssa.dim();
    if let Some(prev) = f_prev {
        if prev.shape() != [h / 2, w / 2, d] || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::ShapeMismatch {
                op: "cmiu coarser input",
                lhs: prev.shape().to_vec(),
                rhs: vec![h / 2, w / 2, d],
            });
        }
    }
    let e_rgb = instrument::section("embed_rgb", || {
        embed(f_rgb, &params.embed_rgb_weight, &params.embed_rgb_bias)
    })?;
    let e_dt = instrument::section("embed_dt", || {
        embed(f_dt, &params.embed_dt_weight, &params.embed_dt_bias)
    })?;
    let s_rgb = instrument::section("imsa_rgb", || {
        blocks::self_attention_block(&ptre::flatten(&e_rgb)?, &params.imsa_rgb)
    })?;
    let s_dt = instrument::section("imsa_dt", || {
        blocks::self_attention_block(&ptre::flatten(&e_dt)?, &params.imsa_dt)
    })?;
    let fused = instrument::section("imca", || blocks::cross_attention_block(&s_rgb, &s_dt, &params.imca))?;
    let cssa_in = match f_prev {
        Some(prev) => {
            let up = ptre::flatten(&tensor::bilinear_upsample(prev, 2)?)?;
            fused.add(&up)?
        }
        None => fused,
    };
    let out = instrument::section("cssa", || blocks::self_attention_block(&cssa_in, &params.cssa))?;
    ptre::unflatten(&out)
}

fn predict(feature: &Tensor, params: &PredictorParams) -> Result<SaliencyMap> {
    let up = tensor::bilinear_upsample(feature, 4)?;
    let h = tensor::conv2d(&up, &params.conv3_weight, &params.conv3_bias)?;
    let h = params.activation.apply(&params.bn.apply_map(&h)?);
    let logits = tensor::conv2d(&h, &params.conv1_weight, &params.conv1_bias)?;
    instrument::trace_shape(feature.shape(), logits.shape());
    SaliencyMap::from_logits(&logits)
}

/// Full decode: CMIU4 → CMIU1, then the predictor.
pub fn tipp_forward(features: &FeaturePyramid, config: &TippConfig, weights: &TippWeights) -> Result<SaliencyMap> {
    config.validate()?;
    features.validate(config)?;
    crate::weights::check_against(weights, config)?;
    let mut prev: Option<Tensor> = None;
    for level in (1..=LEVELS).rev() {
        let f = &features.levels[level - 1];
        let out = instrument::section(&format!("cmiu{level}"), || {
            cmiu_forward(&f.rgb, &f.dt, prev.as_ref(), &weights.cmius[level - 1])
        })
        .map_err(|e| e.at_level(level))?;
        prev = Some(out);
    }
    let top = prev.expect("at least one level");
    instrument::section("predictor", || predict(&top, &weights.predictor))
}
