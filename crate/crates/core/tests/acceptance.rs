//! Acceptance criteria, one line per criterion. Runs without the libtest
//! harness so the summary always prints; exits nonzero on any failure.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::Mat;
use viewmix::attention::{self, AttentionParams, HeadState};
use viewmix::blocks::{self, SelfAttentionBlockParams};
use viewmix::cost;
use viewmix::instrument::{self, OpClass};
use viewmix::ptre::{self, TokenSequence};
use viewmix::rng::Rng;
use viewmix::tipp::{self, FeaturePyramid, TippConfig};
use viewmix::weights;
use viewmix::Tensor;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn bits_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn mat(t: &Tensor) -> Mat {
    let s = t.shape();
    Mat {
        n: s[0],
        d: s[1],
        data: t.data().to_vec(),
    }
}

/// Head with `N ≤ 64` tokens on a grid divisible by `p`, values spread over
/// several magnitudes.
fn random_head(rng: &mut Rng, p: usize) -> HeadState {
    let cap = 64 / (p * p);
    let gh = 1 + rng.below(cap.min(8));
    let gw = 1 + rng.below((cap / gh).clamp(1, 8));
    let (h, w) = (gh * p, gw * p);
    let d = 1 + rng.below(8);
    let s = [0.1, 1.0, 4.0][rng.below(3)];
    let mut t = || rng.normal_tensor(&[h * w, d]).unwrap().scale(s);
    HeadState::new(t(), t(), t(), h, w).unwrap()
}

fn crossover_criterion() -> Outcome {
    let got = cost::crossover(64, 2, 8);
    let oracle = common::crossover(64, 8, 1000);
    ensure(got == Some(66), || format!("cost model gives {got:?}"))?;
    ensure(oracle == Some(66), || format!("big-integer oracle gives {oracle:?}"))?;
    Ok("smallest N = 66 (cost model and big-integer oracle)".into())
}

fn closed_form_criterion() -> Outcome {
    let mut rng = Rng::new(7);
    let mut cases = 0;
    for side in [4usize, 8, 16, 32] {
        for d in [8usize, 64] {
            for heads in [1usize, 2] {
                for p in [1usize, 2, 4, 8] {
                    if side % p != 0 {
                        continue;
                    }
                    let n = side * side;
                    let x = TokenSequence::new(rng.normal_tensor(&[n, d]).unwrap(), side, side).unwrap();
                    let params = AttentionParams::random(d, heads, p, &mut rng).unwrap();
                    let (out, tally) = instrument::measure(|| attention::view_mixed_attention(&x, &x, &params));
                    out.map_err(|e| e.to_string())?;
                    let spatial = (2 * n * n * d / (p * p)) as u64;
                    let channel = (2 * n * d * d / heads) as u64;
                    let ms = tally.macs_of(OpClass::SpatialCore);
                    let mc = tally.macs_of(OpClass::ChannelCore);
                    ensure(ms == spatial && mc == channel, || {
                        format!("N={n} D={d} N_h={heads} p={p}: measured {ms}/{mc}, closed {spatial}/{channel}")
                    })?;
                    cases += 1;
                }
            }
        }
    }
    Ok(format!("{cases} configurations exact"))
}

fn ptre_criterion() -> Outcome {
    let mut rng = Rng::new(11);
    for case in 0..200 {
        let p = [1, 2, 3, 4, 8][rng.below(5)];
        let (h, w, d) = (p * (1 + rng.below(5)), p * (1 + rng.below(5)), 1 + rng.below(7));
        let m = rng.normal_tensor(&[h, w, d]).unwrap();
        let tokens = ptre::to_patch_tokens(&m, p).map_err(|e| e.to_string())?;
        let layout = common::patch_tokens(m.data(), h, w, d, p);
        ensure(tokens.tensor().data() == layout.as_slice(), || {
            format!("case {case}: patch layout differs")
        })?;
        let back = ptre::from_patch_tokens(&tokens).map_err(|e| e.to_string())?;
        ensure(bits_equal(&back, &m), || {
            format!("case {case}: {h}x{w}x{d} p={p} not restored")
        })?;
    }
    Ok("200 cases bit-exact".into())
}

fn oracle_criterion() -> Outcome {
    let mut rng = Rng::new(13);
    let (mut ws, mut wc) = (0.0f64, 0.0f64);
    for case in 0..100 {
        let p = [1, 2, 4][rng.below(3)];
        let hd = random_head(&mut rng, p);
        let got = attention::patchwise_spatial_head_attention(&hd, p).unwrap();
        let want = common::patch_attention(&mat(&hd.q), &mat(&hd.k), &mat(&hd.v), hd.h, hd.w, p);
        let es = max_abs(got.data(), &want);
        let got = attention::channel_head_attention(&hd).unwrap();
        let want = common::channel_attention(&mat(&hd.q), &mat(&hd.k), &mat(&hd.v));
        let ec = max_abs(got.data(), &want);
        ensure(es <= 1e-10 && ec <= 1e-10, || {
            format!("case {case}: spatial {es:e}, channel {ec:e}")
        })?;
        ws = ws.max(es);
        wc = wc.max(ec);
    }
    Ok(format!("100 cases, max error spatial {ws:.1e}, channel {wc:.1e}"))
}

fn unit_patch_criterion() -> Outcome {
    let mut rng = Rng::new(17);
    for case in 0..50 {
        let hd = random_head(&mut rng, 1);
        let a = attention::patchwise_spatial_head_attention(&hd, 1).unwrap();
        let b = attention::spatial_head_attention(&hd).unwrap();
        ensure(bits_equal(&a, &b), || format!("case {case} differs"))?;
    }
    Ok("50 cases bit-identical".into())
}

fn view_mix_criterion() -> Outcome {
    let mut rng = Rng::new(19);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let x = TokenSequence::new(rng.normal_tensor(&[64, 8]).unwrap(), 8, 8).unwrap();
        let y = TokenSequence::new(rng.normal_tensor(&[64, 8]).unwrap(), 8, 8).unwrap();
        let mut p = AttentionParams::random(8, 2, 2, &mut rng).unwrap();
        let branches = attention::view_branches(&x, &y, &p).unwrap();
        let mut run = |a: f64, b: f64| {
            p.alpha = a;
            p.beta = b;
            attention::view_mixed_attention(&x, &y, &p).unwrap().into_tensor()
        };
        let (s, c, m) = (run(1.0, 0.0), run(0.0, 1.0), run(0.5, 0.5));
        ensure(bits_equal(&s, &branches.spatial), || {
            "(1,0) differs from spatial branch".into()
        })?;
        ensure(bits_equal(&c, &branches.channel), || {
            "(0,1) differs from channel branch".into()
        })?;
        let mean: Vec<f64> = s.data().iter().zip(c.data()).map(|(a, b)| (a + b) / 2.0).collect();
        worst = worst.max(max_abs(m.data(), &mean));
    }
    ensure(worst <= 1e-12, || format!("midpoint error {worst:e}"))?;
    Ok(format!("isolation bit-exact, midpoint error {worst:.1e}"))
}

fn residual_criterion() -> Outcome {
    let cfg = TippConfig::default();
    let mut rng = Rng::new(23);
    let mut sides = Vec::new();
    for l in &cfg.levels {
        let x = TokenSequence::new(rng.normal_tensor(&[l.tokens(), cfg.dim]).unwrap(), l.h, l.w).unwrap();
        let params = SelfAttentionBlockParams::zeros(cfg.dim, cfg.heads, l.patch, cfg.ffn_hidden, cfg.bn_eps).unwrap();
        let y = blocks::self_attention_block(&x, &params).unwrap();
        ensure(bits_equal(y.tensor(), x.tensor()), || {
            format!("{}x{} not preserved", l.h, l.w)
        })?;
        sides.push(l.h.to_string());
    }
    Ok(format!("identity at {}", sides.join("/")))
}

fn end_to_end_criterion() -> Outcome {
    let cfg = TippConfig::default();
    let features = FeaturePyramid::synthetic(&cfg, 42).unwrap();
    let w = weights::init_weights(&cfg, 42).unwrap();
    let start = Instant::now();
    let a = tipp::tipp_forward(&features, &cfg, &w).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let b = tipp::tipp_forward(&features, &cfg, &w).map_err(|e| e.to_string())?;
    ensure(a.extent() == (256, 256), || format!("extent {:?}", a.extent()))?;
    ensure(bits_equal(a.values(), b.values()), || "second run differs".into())?;
    let (lo, hi) = (a.values().min_value(), a.values().max_value());
    ensure(lo > 0.0 && hi < 1.0, || format!("range [{lo}, {hi}]"))?;
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "256x256 in {:.2}s, range [{lo:.4}, {hi:.4}], deterministic",
        elapsed.as_secs_f64()
    ))
}

fn sweep_criterion() -> Outcome {
    let cfg = TippConfig::default();
    let features = FeaturePyramid::synthetic(&cfg, 42).unwrap();
    let w = weights::init_weights(&cfg, 42).unwrap();
    let start = Instant::now();
    let rows = cost::patch_sweep(&cfg, &[[2; 4], [4; 4], [8; 4]], &features, &w).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let flops: Vec<u64> = rows.iter().map(|r| r.decoder_flops_measured).collect();
    ensure(flops.windows(2).all(|w| w[0] > w[1]), || {
        format!("not decreasing: {flops:?}")
    })?;
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("decoder MACs {flops:?} in {:.2}s", elapsed.as_secs_f64()))
}

fn linearity_criterion() -> Outcome {
    let mut rng = Rng::new(29);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let p = [1, 2, 4][rng.below(3)];
        let hd = random_head(&mut rng, p);
        let v2 = rng.normal_tensor(hd.v.shape()).unwrap();
        let (a, b) = (rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0));
        let mixed = hd.v.scale(a).add(&v2.scale(b)).unwrap();
        let with_v = |v: &Tensor| HeadState::new(hd.q.clone(), hd.k.clone(), v.clone(), hd.h, hd.w).unwrap();
        let branches: [&dyn Fn(&HeadState) -> Tensor; 2] =
            [&|h| attention::patchwise_spatial_head_attention(h, p).unwrap(), &|h| {
                attention::channel_head_attention(h).unwrap()
            }];
        for f in branches {
            let lhs = f(&with_v(&mixed));
            let rhs: Vec<f64> = f(&hd)
                .data()
                .iter()
                .zip(f(&with_v(&v2)).data())
                .map(|(x, y)| a * x + b * y)
                .collect();
            let e = max_abs(lhs.data(), &rhs);
            ensure(e <= 1e-10, || format!("linearity case {case}: {e:e}"))?;
            worst = worst.max(e);
        }
    }
    let mut worst_perm = 0.0f64;
    for case in 0..50 {
        let n = 1 + rng.below(48);
        let d = 2 * (1 + rng.below(4));
        let x = TokenSequence::new(rng.normal_tensor(&[n, d]).unwrap(), 1, n).unwrap();
        let params = AttentionParams::random(d, 2, 1, &mut rng).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.below(i + 1));
        }
        let permute = |t: &Tensor| {
            let data = perm
                .iter()
                .flat_map(|&i| t.data()[i * d..(i + 1) * d].to_vec())
                .collect();
            Tensor::new(&[n, d], data).unwrap()
        };
        let xp = TokenSequence::new(permute(x.tensor()), 1, n).unwrap();
        let y = attention::view_mixed_attention(&x, &x, &params).unwrap();
        let yp = attention::view_mixed_attention(&xp, &xp, &params).unwrap();
        let e = max_abs(permute(y.tensor()).data(), yp.tensor().data());
        ensure(e <= 1e-10, || format!("equivariance case {case}: {e:e}"))?;
        worst_perm = worst_perm.max(e);
    }
    Ok(format!(
        "50+50 cases, linearity {worst:.1e}, equivariance {worst_perm:.1e}"
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("complexity crossover", crossover_criterion),
        ("closed form vs instrumented", closed_form_criterion),
        ("patch re-embedding roundtrip", ptre_criterion),
        ("attention oracle equivalence", oracle_criterion),
        ("unit patch degeneracy", unit_patch_criterion),
        ("view-mix isolation", view_mix_criterion),
        ("residual identity", residual_criterion),
        ("end-to-end contract", end_to_end_criterion),
        ("patch sweep monotonicity", sweep_criterion),
        ("linearity and equivariance", linearity_criterion),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let res = f();
        let secs = start.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("PASS  {name:<30} {detail} [{secs:.2}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name:<30} {detail} [{secs:.2}s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
