//! Named decoder parameters: seeded initialization and the on-disk layout.
//!
//! Every tensor has a dotted name of the form `cmiu{i}.{block}.{layer}.{param}`
//! (or `predictor.{layer}.{param}`). A weight directory holds one
//! `{name}.cavr` file per tensor and a `manifest.txt` listing
//! `{name} = {extents}` lines, extents written as `AxBxC`. The mixing
//! weights α and β of each attention are stored together as the 2-vector
//! `…attn*.mix`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::attention::AttentionParams;
use crate::blocks::{BatchNorm, ConvFfnParams, CrossAttentionBlockParams, SelfAttentionBlockParams};
use crate::error::{Error, Result};
use crate::io;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::tipp::{CmiuParams, PredictorParams, TippConfig, TippWeights};

pub const MANIFEST: &str = "manifest.txt";

/// What a named tensor is, for initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight {
        fan_in: usize,
    },
    Bias {
        fan_in: usize,
    },
    BnMean,
    BnVar,
    BnGamma,
    BnBeta,
    /// `[α, β]`
    Mix,
}

type Visitor<'a> = dyn FnMut(&str, ParamKind, &mut Tensor) -> Result<()> + 'a;

fn visit_bn(prefix: &str, bn: &mut BatchNorm, f: &mut Visitor) -> Result<()> {
    f(&format!("{prefix}.mean"), ParamKind::BnMean, &mut bn.mean)?;
    f(&format!("{prefix}.var"), ParamKind::BnVar, &mut bn.var)?;
    f(&format!("{prefix}.gamma"), ParamKind::BnGamma, &mut bn.gamma)?;
    f(&format!("{prefix}.beta"), ParamKind::BnBeta, &mut bn.beta)
}

fn visit_conv(prefix: &str, weight: &mut Tensor, bias: &mut Tensor, f: &mut Visitor) -> Result<()> {
    let s = weight.shape();
    let fan_in = s[1..].iter().product();
    f(&format!("{prefix}.weight"), ParamKind::Weight { fan_in }, weight)?;
    f(&format!("{prefix}.bias"), ParamKind::Bias { fan_in }, bias)
}

fn visit_attn(prefix: &str, a: &mut AttentionParams, f: &mut Visitor) -> Result<()> {
    let fan_in = a.dim;
    for (tag, list) in [("wq", &mut a.w_q), ("wk", &mut a.w_k), ("wv", &mut a.w_v)] {
        for (h, t) in list.iter_mut().enumerate() {
            f(&format!("{prefix}.{tag}{h}"), ParamKind::Weight { fan_in }, t)?;
        }
    }
    f(&format!("{prefix}.ws"), ParamKind::Weight { fan_in }, &mut a.w_s)?;
    f(&format!("{prefix}.wc"), ParamKind::Weight { fan_in }, &mut a.w_c)?;
    let mut mix = Tensor::new(&[2], vec![a.alpha, a.beta])?;
    f(&format!("{prefix}.mix"), ParamKind::Mix, &mut mix)?;
    if mix.shape() != [2] {
        return Err(Error::ExtentMismatch {
            name: format!("{prefix}.mix"),
            expected: vec![2],
            found: mix.shape().to_vec(),
        });
    }
    a.alpha = mix.data()[0];
    a.beta = mix.data()[1];
    Ok(())
}

fn visit_ffn(prefix: &str, p: &mut ConvFfnParams, f: &mut Visitor) -> Result<()> {
    visit_conv(
        &format!("{prefix}.ffn_conv3"),
        &mut p.conv3_weight,
        &mut p.conv3_bias,
        f,
    )?;
    visit_bn(&format!("{prefix}.ffn_bn"), &mut p.bn, f)?;
    visit_conv(
        &format!("{prefix}.ffn_conv1"),
        &mut p.conv1_weight,
        &mut p.conv1_bias,
        f,
    )
}

fn visit_self_block(prefix: &str, b: &mut SelfAttentionBlockParams, f: &mut Visitor) -> Result<()> {
    visit_bn(&format!("{prefix}.norm1"), &mut b.norm1, f)?;
    visit_attn(&format!("{prefix}.attn"), &mut b.attn, f)?;
    visit_bn(&format!("{prefix}.norm2"), &mut b.norm2, f)?;
    visit_ffn(prefix, &mut b.ffn, f)
}

fn visit_cross_block(prefix: &str, b: &mut CrossAttentionBlockParams, f: &mut Visitor) -> Result<()> {
    visit_bn(&format!("{prefix}.norm_rgb"), &mut b.norm_rgb, f)?;
    visit_bn(&format!("{prefix}.norm_dt"), &mut b.norm_dt, f)?;
    visit_attn(&format!("{prefix}.attn_rgb"), &mut b.attn_rgb, f)?;
    visit_attn(&format!("{prefix}.attn_dt"), &mut b.attn_dt, f)?;
    visit_bn(&format!("{prefix}.norm_fused"), &mut b.norm_fused, f)?;
    visit_ffn(prefix, &mut b.ffn, f)
}

fn visit_cmiu(level: usize, c: &mut CmiuParams, f: &mut Visitor) -> Result<()> {
    let p = format!("cmiu{level}");
    visit_conv(
        &format!("{p}.embed.rgb"),
        &mut c.embed_rgb_weight,
        &mut c.embed_rgb_bias,
        f,
    )?;
    visit_conv(
        &format!("{p}.embed.dt"),
        &mut c.embed_dt_weight,
        &mut c.embed_dt_bias,
        f,
    )?;
    visit_self_block(&format!("{p}.imsa_rgb"), &mut c.imsa_rgb, f)?;
    visit_self_block(&format!("{p}.imsa_dt"), &mut c.imsa_dt, f)?;
    visit_cross_block(&format!("{p}.imca"), &mut c.imca, f)?;
    visit_self_block(&format!("{p}.cssa"), &mut c.cssa, f)
}

fn visit_predictor(p: &mut PredictorParams, f: &mut Visitor) -> Result<()> {
    visit_conv("predictor.conv3", &mut p.conv3_weight, &mut p.conv3_bias, f)?;
    visit_bn("predictor.bn", &mut p.bn, f)?;
    visit_conv("predictor.conv1", &mut p.conv1_weight, &mut p.conv1_bias, f)
}

impl TippWeights {
    /// Visits every named tensor in a fixed order (level 1 first).
    pub fn visit_mut(&mut self, f: &mut Visitor) -> Result<()> {
        for (i, c) in self.cmius.iter_mut().enumerate() {
            visit_cmiu(i + 1, c, f)?;
        }
        visit_predictor(&mut self.predictor, f)
    }

    /// Names and tensors in visiting order.
    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut copy = self.clone();
        let mut out = Vec::new();
        copy.visit_mut(&mut |name, _, t| {
            out.push((name.to_string(), t.clone()));
            Ok(())
        })
        .expect("collecting names cannot fail");
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Uniform(−s, s) with `s = 1/√fan_in` for every weight and bias, drawn in
/// visiting order from one seeded stream; identity batch norms; α = β = 0.5.
pub fn init_weights(config: &TippConfig, seed: u64) -> Result<TippWeights> {
    let mut w = TippWeights::zeros(config)?;
    let mut rng = Rng::new(seed);
    w.visit_mut(&mut |_, kind, t| {
        *t = match kind {
            ParamKind::Weight { fan_in } | ParamKind::Bias { fan_in } => {
                rng.uniform_tensor(t.shape(), 1.0 / (fan_in as f64).sqrt())?
            }
            ParamKind::BnMean | ParamKind::BnBeta => Tensor::zeros(t.shape())?,
            ParamKind::BnVar | ParamKind::BnGamma => Tensor::full(t.shape(), 1.0)?,
            ParamKind::Mix => Tensor::new(&[2], vec![0.5, 0.5])?,
        };
        Ok(())
    })?;
    Ok(w)
}

fn extents(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn parse_extents(s: &str) -> Option<Vec<usize>> {
    s.split('x').map(|p| p.trim().parse().ok()).collect()
}

pub fn save_weights(weights: &TippWeights, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("# CAVR v1 weight manifest: name = extents\n");
    for (name, t) in weights.named() {
        io::write_cavr(&dir.join(format!("{name}.cavr")), &t)?;
        manifest.push_str(&format!("{name} = {}\n", extents(t.shape())));
    }
    // Written last: a directory without a manifest is incomplete.
    io::write_atomic(&dir.join(MANIFEST), manifest.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<BTreeMap<String, Vec<usize>>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, ext) = line
            .split_once('=')
            .and_then(|(n, e)| Some((n.trim(), parse_extents(e.trim())?)))
            .ok_or_else(|| Error::Config(format!("{}:{}: malformed line `{line}`", path.display(), lineno + 1)))?;
        out.insert(name.to_string(), ext);
    }
    Ok(out)
}

/// Loads every tensor the configuration needs, checking each against the
/// manifest and the configured extents.
pub fn load_weights(config: &TippConfig, dir: &Path) -> Result<TippWeights> {
    let mut manifest = read_manifest(dir)?;
    let mut w = TippWeights::zeros(config)?;
    w.visit_mut(&mut |name, _, t| {
        let listed = manifest
            .remove(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        let path = dir.join(format!("{name}.cavr"));
        if !path.exists() {
            return Err(Error::MissingTensor(name.to_string()));
        }
        let loaded = io::read_cavr(&path)?;
        for found in [&listed[..], loaded.shape()] {
            if found != t.shape() {
                return Err(Error::ExtentMismatch {
                    name: name.to_string(),
                    expected: t.shape().to_vec(),
                    found: found.to_vec(),
                });
            }
        }
        *t = loaded;
        Ok(())
    })?;
    if let Some(extra) = manifest.keys().next() {
        return Err(Error::Config(format!(
            "manifest lists `{extra}`, which this configuration does not use"
        )));
    }
    check_against(&w, config)?;
    Ok(w)
}

/// Verifies that every tensor has the extents `config` implies and that the
/// mixing weights are in range.
pub fn check_against(weights: &TippWeights, config: &TippConfig) -> Result<()> {
    let expected = TippWeights::zeros(config)?.named();
    let actual = weights.named();
    if expected.len() != actual.len() {
        return Err(Error::Config(format!(
            "weight set holds {} tensors, configuration needs {}",
            actual.len(),
            expected.len()
        )));
    }
    for ((en, et), (an, at)) in expected.iter().zip(&actual) {
        if en != an {
            return Err(Error::MissingTensor(en.clone()));
        }
        if et.shape() != at.shape() {
            return Err(Error::ExtentMismatch {
                name: en.clone(),
                expected: et.shape().to_vec(),
                found: at.shape().to_vec(),
            });
        }
    }
    for (i, c) in weights.cmius.iter().enumerate() {
        for a in [
            &c.imsa_rgb.attn,
            &c.imsa_dt.attn,
            &c.imca.attn_rgb,
            &c.imca.attn_dt,
            &c.cssa.attn,
        ] {
            if a.patch != config.levels[i].patch {
                return Err(Error::Config(format!(
                    "attention patch {} differs from configured {}",
                    a.patch, config.levels[i].patch
                ))
                .at_level(i + 1));
            }
            a.validate().map_err(|e| e.at_level(i + 1))?;
        }
    }
    Ok(())
}
