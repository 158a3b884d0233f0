//! Self-check suite: randomized property and oracle checks over the
//! decoder kernels, runnable from the command line.
//!
//! The oracles here are written with explicit loops over raw slices and do
//! not call into the attention or patch-embedding code they check.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::attention::{self, AttentionParams, HeadState};
use crate::blocks::{self, SelfAttentionBlockParams};
use crate::cost;
use crate::error::Result;
use crate::instrument::{self, OpClass};
use crate::io;
use crate::ptre::{self, TokenSequence};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::tipp::TippConfig;

#[derive(Debug, Clone)]
pub struct CheckOptions {
    pub seed: u64,
    /// Runs every check with the spatial scale fault hook enabled.
    pub inject_spatial_scale_fault: bool,
    /// Where failing checks persist their counterexample tensors.
    pub counterexample_dir: Option<PathBuf>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            seed: 42,
            inject_spatial_scale_fault: false,
            counterexample_dir: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub millis: u128,
    #[serde(skip)]
    pub counterexample: Vec<(String, Tensor)>,
}

type CheckResult = std::result::Result<String, (String, Vec<(String, Tensor)>)>;

fn fail(detail: impl Into<String>, tensors: Vec<(&str, &Tensor)>) -> CheckResult {
    Err((
        detail.into(),
        tensors.into_iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
    ))
}

fn internal(e: crate::error::Error) -> (String, Vec<(String, Tensor)>) {
    (format!("error: {e}"), Vec::new())
}

/// Spatial attention over explicitly built patch tokens, folded back by
/// the same loops. Inputs are `h·w × d` row-major.
#[allow(clippy::needless_range_loop)]
pub fn oracle_patch_attention(q: &[f64], k: &[f64], v: &[f64], h: usize, w: usize, d: usize, p: usize) -> Vec<f64> {
    let (gh, gw) = (h / p, w / p);
    let np = gh * gw;
    let width = d * p * p;
    let gather = |src: &[f64]| -> Vec<Vec<f64>> {
        let mut tokens = vec![Vec::with_capacity(width); np];
        for py in 0..gh {
            for px in 0..gw {
                for iy in 0..p {
                    for ix in 0..p {
                        let pix = (py * p + iy) * w + px * p + ix;
                        for c in 0..d {
                            tokens[py * gw + px].push(src[pix * d + c]);
                        }
                    }
                }
            }
        }
        tokens
    };
    let (qt, kt, vt) = (gather(q), gather(k), gather(v));
    let scale = (width as f64).sqrt();
    let mut out = vec![0.0; h * w * d];
    for i in 0..np {
        let mut logits = vec![0.0; np];
        for j in 0..np {
            let mut s = 0.0;
            for c in 0..width {
                s += qt[i][c] * kt[j][c];
            }
            logits[j] = s / scale;
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut token = vec![0.0; width];
        for j in 0..np {
            for c in 0..width {
                token[c] += e[j] / z * vt[j][c];
            }
        }
        let (py, px) = (i / gw, i % gw);
        let mut it = token.into_iter();
        for iy in 0..p {
            for ix in 0..p {
                let pix = (py * p + iy) * w + px * p + ix;
                for c in 0..d {
                    out[pix * d + c] = it.next().unwrap();
                }
            }
        }
    }
    out
}

/// Channel attention by the direct formula
/// `out[i][a] = Σ_b softmax_b(Σ_t q[t][a]·k[t][b] / √n) · v[i][b]`.
pub fn oracle_channel_attention(q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize) -> Vec<f64> {
    let scale = (n as f64).sqrt();
    let mut weights = vec![0.0; d * d];
    for a in 0..d {
        let mut logits = vec![0.0; d];
        for (b, l) in logits.iter_mut().enumerate() {
            let mut s = 0.0;
            for t in 0..n {
                s += q[t * d + a] * k[t * d + b];
            }
            *l = s / scale;
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for b in 0..d {
            weights[a * d + b] = e[b] / z;
        }
    }
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for a in 0..d {
            let mut s = 0.0;
            for b in 0..d {
                s += weights[a * d + b] * v[i * d + b];
            }
            out[i * d + a] = s;
        }
    }
    out
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Random head with `N ≤ 64` tokens on a grid divisible by `p`.
fn random_head(rng: &mut Rng, p: usize) -> Result<HeadState> {
    let cap = 64 / (p * p);
    let gh = 1 + rng.below(cap.min(8));
    let gw = 1 + rng.below((cap / gh).clamp(1, 8));
    let (h, w) = (gh * p, gw * p);
    let d = 1 + rng.below(8);
    let scale = [0.5, 1.0, 3.0][rng.below(3)];
    let mut t = || -> Result<Tensor> { Ok(rng.normal_tensor(&[h * w, d])?.scale(scale)) };
    HeadState::new(t()?, t()?, t()?, h, w)
}

fn check_ptre_roundtrip(rng: &mut Rng) -> CheckResult {
    for case in 0..200 {
        let p = [1, 2, 3, 4, 8][rng.below(5)];
        let (h, w, d) = (p * (1 + rng.below(4)), p * (1 + rng.below(4)), 1 + rng.below(6));
        let m = rng.normal_tensor(&[h, w, d]).map_err(internal)?;
        let back = ptre::to_patch_tokens(&m, p)
            .and_then(|t| ptre::from_patch_tokens(&t))
            .map_err(internal)?;
        if back
            .data()
            .iter()
            .zip(m.data())
            .any(|(a, b)| a.to_bits() != b.to_bits())
        {
            return fail(
                format!("case {case}: {h}x{w}x{d} p={p} not restored"),
                vec![("map", &m)],
            );
        }
    }
    Ok("200 cases bit-exact".into())
}

fn check_attention_oracle(rng: &mut Rng) -> CheckResult {
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let p = [1, 2, 4][rng.below(3)];
        let hd = random_head(rng, p).map_err(internal)?;
        let got = attention::patchwise_spatial_head_attention(&hd, p).map_err(internal)?;
        let want = oracle_patch_attention(hd.q.data(), hd.k.data(), hd.v.data(), hd.h, hd.w, hd.head_dim(), p);
        let err = max_abs(got.data(), &want);
        worst = worst.max(err);
        if err > 1e-10 {
            return fail(
                format!(
                    "case {case}: {}x{} d={} p={p}, max error {err:.3e}",
                    hd.h,
                    hd.w,
                    hd.head_dim()
                ),
                vec![("q", &hd.q), ("k", &hd.k), ("v", &hd.v), ("production", &got)],
            );
        }
    }
    Ok(format!("100 cases, max error {worst:.1e}"))
}

fn check_channel_oracle(rng: &mut Rng) -> CheckResult {
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let hd = random_head(rng, 1).map_err(internal)?;
        let got = attention::channel_head_attention(&hd).map_err(internal)?;
        let want = oracle_channel_attention(hd.q.data(), hd.k.data(), hd.v.data(), hd.n_tokens(), hd.head_dim());
        let err = max_abs(got.data(), &want);
        worst = worst.max(err);
        if err > 1e-10 {
            return fail(
                format!("case {case}: max error {err:.3e}"),
                vec![("q", &hd.q), ("k", &hd.k), ("v", &hd.v), ("production", &got)],
            );
        }
    }
    Ok(format!("100 cases, max error {worst:.1e}"))
}

fn check_unit_patch(rng: &mut Rng) -> CheckResult {
    for case in 0..50 {
        let hd = random_head(rng, 1).map_err(internal)?;
        let a = attention::patchwise_spatial_head_attention(&hd, 1).map_err(internal)?;
        let b = attention::spatial_head_attention(&hd).map_err(internal)?;
        if a.data().iter().zip(b.data()).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return fail(
                format!("case {case} differs"),
                vec![("q", &hd.q), ("k", &hd.k), ("v", &hd.v)],
            );
        }
    }
    Ok("50 cases bit-identical".into())
}

fn random_tokens(rng: &mut Rng, h: usize, w: usize, d: usize) -> Result<TokenSequence> {
    TokenSequence::new(rng.normal_tensor(&[h * w, d])?, h, w)
}

fn check_view_mix(rng: &mut Rng) -> CheckResult {
    let x = random_tokens(rng, 8, 8, 8).map_err(internal)?;
    let mut p = AttentionParams::random(8, 2, 2, rng).map_err(internal)?;
    let run = |p: &AttentionParams| attention::view_mixed_attention(&x, &x, p).map(TokenSequence::into_tensor);
    p.alpha = 1.0;
    p.beta = 0.0;
    let spatial = run(&p).map_err(internal)?;
    p.alpha = 0.0;
    p.beta = 1.0;
    let channel = run(&p).map_err(internal)?;
    let branches = attention::view_branches(&x, &x, &p).map_err(internal)?;
    if spatial != branches.spatial || channel != branches.channel {
        return fail("isolated branch mismatch", vec![("x", x.tensor())]);
    }
    p.alpha = 0.5;
    p.beta = 0.5;
    let mid = run(&p).map_err(internal)?;
    let mean = spatial.add(&channel).map_err(internal)?.scale(0.5);
    let err = mid.max_abs_diff(&mean).map_err(internal)?;
    if err > 1e-12 {
        return fail(format!("midpoint error {err:.3e}"), vec![("x", x.tensor())]);
    }
    Ok(format!("isolation bit-exact, midpoint error {err:.1e}"))
}

fn check_residual_identity(rng: &mut Rng) -> CheckResult {
    let cfg = TippConfig::default();
    for l in &cfg.levels {
        let x = random_tokens(rng, l.h, l.w, cfg.dim).map_err(internal)?;
        let params = SelfAttentionBlockParams::zeros(cfg.dim, cfg.heads, l.patch, cfg.ffn_hidden, cfg.bn_eps)
            .map_err(internal)?;
        let y = blocks::self_attention_block(&x, &params).map_err(internal)?;
        if y != x {
            return fail(format!("{}x{} not preserved", l.h, l.w), vec![("x", x.tensor())]);
        }
    }
    Ok("identity at 64/32/16/8".into())
}

fn check_crossover() -> CheckResult {
    match cost::crossover(64, 2, 8) {
        Some(66) => Ok("crossover(64, 2, 8) = 66".into()),
        other => fail(format!("crossover(64, 2, 8) = {other:?}, expected 66"), vec![]),
    }
}

fn check_instrumented_counts(rng: &mut Rng) -> CheckResult {
    let mut cases = 0;
    for side in [4usize, 8, 16] {
        for d in [8usize, 64] {
            for heads in [1usize, 2] {
                for p in [1usize, 2, 4, 8] {
                    if side % p != 0 {
                        continue;
                    }
                    let n = side * side;
                    let x = random_tokens(rng, side, side, d).map_err(internal)?;
                    let params = AttentionParams::random(d, heads, p, rng).map_err(internal)?;
                    let (res, tally) = instrument::measure(|| attention::view_mixed_attention(&x, &x, &params));
                    res.map_err(internal)?;
                    let spatial = (2 * n * n * d / (p * p)) as u64;
                    let channel = (2 * n * d * d / heads) as u64;
                    let (ms, mc) = (tally.macs_of(OpClass::SpatialCore), tally.macs_of(OpClass::ChannelCore));
                    if ms != spatial || mc != channel {
                        return fail(
                            format!("N={n} D={d} N_h={heads} p={p}: measured {ms}/{mc}, closed {spatial}/{channel}"),
                            vec![],
                        );
                    }
                    cases += 1;
                }
            }
        }
    }
    Ok(format!("{cases} configurations exact"))
}

fn check_linearity(rng: &mut Rng) -> CheckResult {
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let p = [1, 2][rng.below(2)];
        let hd = random_head(rng, p).map_err(internal)?;
        let v2 = rng.normal_tensor(hd.v.shape()).map_err(internal)?;
        let (a, b) = (rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0));
        let mix = hd.v.scale(a).add(&v2.scale(b)).map_err(internal)?;
        let with_v = |v: &Tensor| HeadState::new(hd.q.clone(), hd.k.clone(), v.clone(), hd.h, hd.w);
        for branch in 0..2 {
            let run = |h: &HeadState| {
                if branch == 0 {
                    attention::patchwise_spatial_head_attention(h, p)
                } else {
                    attention::channel_head_attention(h)
                }
            };
            let lhs = run(&with_v(&mix).map_err(internal)?).map_err(internal)?;
            let r1 = run(&hd).map_err(internal)?;
            let r2 = run(&with_v(&v2).map_err(internal)?).map_err(internal)?;
            let rhs = r1.scale(a).add(&r2.scale(b)).map_err(internal)?;
            let err = lhs.max_abs_diff(&rhs).map_err(internal)?;
            worst = worst.max(err);
            if err > 1e-10 {
                return fail(
                    format!("linearity error {err:.3e}"),
                    vec![("q", &hd.q), ("k", &hd.k), ("v", &hd.v)],
                );
            }
        }
    }
    Ok(format!("max error {worst:.1e}"))
}

fn check_softmax(rng: &mut Rng) -> CheckResult {
    for _ in 0..50 {
        let x = rng.normal_tensor(&[4, 7]).map_err(internal)?.scale(1e3);
        let s = x.softmax_rows().map_err(internal)?;
        for row in s.data().chunks(7) {
            if row.iter().any(|&v| v < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return fail("row not stochastic", vec![("logits", &x)]);
            }
        }
    }
    Ok("50 cases at logit magnitude 1e3".into())
}

fn persist(dir: &Path, name: &str, tensors: &[(String, Tensor)]) -> Result<()> {
    if tensors.is_empty() {
        return Ok(());
    }
    let sub = dir.join(name);
    std::fs::create_dir_all(&sub).map_err(|e| crate::error::Error::io(&sub, e))?;
    for (n, t) in tensors {
        io::write_cavr(&sub.join(format!("{n}.cavr")), t)?;
    }
    Ok(())
}

/// Names of every check, in execution order.
pub const CHECKS: [&str; 10] = [
    "ptre_roundtrip",
    "spatial_attention_oracle",
    "channel_attention_oracle",
    "unit_patch_degeneracy",
    "view_mix_isolation",
    "residual_identity",
    "cost_crossover",
    "instrumented_counts",
    "attention_linearity",
    "softmax_normalization",
];

pub fn run_checks(opts: &CheckOptions) -> Result<Vec<CheckOutcome>> {
    let run_all = || -> Vec<CheckOutcome> {
        let mut rng = Rng::new(opts.seed);
        CHECKS
            .iter()
            .map(|&name| {
                let start = Instant::now();
                let res = match name {
                    "ptre_roundtrip" => check_ptre_roundtrip(&mut rng),
                    "spatial_attention_oracle" => check_attention_oracle(&mut rng),
                    "channel_attention_oracle" => check_channel_oracle(&mut rng),
                    "unit_patch_degeneracy" => check_unit_patch(&mut rng),
                    "view_mix_isolation" => check_view_mix(&mut rng),
                    "residual_identity" => check_residual_identity(&mut rng),
                    "cost_crossover" => check_crossover(),
                    "instrumented_counts" => check_instrumented_counts(&mut rng),
                    "attention_linearity" => check_linearity(&mut rng),
                    "softmax_normalization" => check_softmax(&mut rng),
                    _ => unreachable!(),
                };
                let millis = start.elapsed().as_millis();
                match res {
                    Ok(detail) => CheckOutcome {
                        name,
                        passed: true,
                        detail,
                        millis,
                        counterexample: Vec::new(),
                    },
                    Err((detail, counterexample)) => CheckOutcome {
                        name,
                        passed: false,
                        detail,
                        millis,
                        counterexample,
                    },
                }
            })
            .collect()
    };
    let outcomes = if opts.inject_spatial_scale_fault {
        attention::with_spatial_scale_fault(run_all)
    } else {
        run_all()
    };
    if let Some(dir) = &opts.counterexample_dir {
        for o in outcomes.iter().filter(|o| !o.passed) {
            persist(dir, o.name, &o.counterexample)?;
        }
    }
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pristine_suite_passes() {
        let out = run_checks(&CheckOptions::default()).unwrap();
        for o in &out {
            assert!(o.passed, "{}: {}", o.name, o.detail);
        }
        assert_eq!(out.len(), CHECKS.len());
    }

    #[test]
    fn injected_scale_fault_is_caught() {
        let dir = tempfile::tempdir().unwrap();
        let opts = CheckOptions {
            inject_spatial_scale_fault: true,
            counterexample_dir: Some(dir.path().to_path_buf()),
            ..CheckOptions::default()
        };
        let out = run_checks(&opts).unwrap();
        let oracle = out.iter().find(|o| o.name == "spatial_attention_oracle").unwrap();
        assert!(!oracle.passed);
        assert!(dir.path().join("spatial_attention_oracle/q.cavr").exists());
        assert!(out.iter().find(|o| o.name == "cost_crossover").unwrap().passed);
    }
}
