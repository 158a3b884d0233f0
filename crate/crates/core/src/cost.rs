//! Closed-form and instrumented cost accounting for the attention kernels.
//!
//! Closed forms count multiply-adds of the two attention matrix products,
//! so plain pixel attention over `N` tokens of width `D` costs `2N²D`
//! (`N²D` for `Q·Kᵀ`, `N²D` for the weighted sum of values). The
//! view-mixed form costs `2N²D/p² + 2ND²`. With the channel products taken
//! per head, as the kernels execute them, the channel term is `2ND²/N_h`;
//! both channel figures are reported everywhere.
//!
//! Memory counts elements: attention matrices plus the branch outputs.
//! Standard attention holds `N_h·N² + ND`, view-mixed attention
//! `N_h·N²/p⁴ + D²/N_h + 2ND`.
//!
//! All arithmetic is exact: integers and `u128` rationals.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionParams};
use crate::error::{Error, Result};
use crate::instrument::{self, OpClass, Tally};
use crate::ptre::TokenSequence;
use crate::rng::Rng;
use crate::tipp::{self, FeaturePyramid, TippConfig, TippWeights, LEVELS};

pub type Exact = Ratio<u128>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionCost {
    pub flops: u128,
    pub mem: u128,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VmaCost {
    /// `2N²D/p² + 2ND²`
    pub flops: Exact,
    /// `2N²D/p²`
    pub flops_spatial: Exact,
    /// `2ND²`
    pub flops_channel: u128,
    /// `2ND²/N_h`
    pub flops_channel_per_head: Exact,
    /// `N_h·N²/p⁴ + D²/N_h + 2ND`
    pub mem: Exact,
    /// Terms that are not whole numbers for these arguments.
    pub integrality_violations: Vec<String>,
}

impl VmaCost {
    /// Spatial term plus the per-head channel term.
    pub fn flops_per_head_variant(&self) -> Exact {
        self.flops_spatial + self.flops_channel_per_head
    }
}

fn check_args(n: u64, d: u64, heads: u64) -> Result<()> {
    if n == 0 || d == 0 || heads == 0 {
        return Err(Error::Config("cost arguments must be positive".into()));
    }
    if !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("D = {d} is not divisible by N_h = {heads}")));
    }
    Ok(())
}

/// `flops = 2N²D`, `mem = N_h·N² + N·D`.
pub fn standard_attention_cost(n: u64, d: u64, heads: u64) -> Result<AttentionCost> {
    check_args(n, d, heads)?;
    let (n, d, h) = (n as u128, d as u128, heads as u128);
    Ok(AttentionCost {
        flops: 2 * n * n * d,
        mem: h * n * n + n * d,
    })
}

pub fn vma_attention_cost(n: u64, d: u64, heads: u64, p: u64) -> Result<VmaCost> {
    check_args(n, d, heads)?;
    if p == 0 {
        return Err(Error::Config("patch side must be positive".into()));
    }
    let (n, d, h, p) = (n as u128, d as u128, heads as u128, p as u128);
    let p2 = p * p;
    let flops_spatial = Exact::new(2 * n * n * d, p2);
    let flops_channel = 2 * n * d * d;
    let flops_channel_per_head = Exact::new(2 * n * d * d, h);
    let spatial_mem = Exact::new(h * n * n, p2 * p2);
    let mem = spatial_mem + Exact::new(d * d, h) + Exact::from_integer(2 * n * d);

    let mut integrality_violations = Vec::new();
    if n % p2 != 0 {
        integrality_violations.push(format!("p² = {p2} does not divide N = {n}"));
    }
    if !spatial_mem.is_integer() {
        integrality_violations.push(format!("p⁴ = {} does not divide N_h·N² = {}", p2 * p2, h * n * n));
    }
    Ok(VmaCost {
        flops: flops_spatial + Exact::from_integer(flops_channel),
        flops_spatial,
        flops_channel,
        flops_channel_per_head,
        mem,
        integrality_violations,
    })
}

/// Smallest token count `N` at which the view-mixed flops fall strictly
/// below the standard `2N²D`, found by an exact integer scan. `None` when no
/// such `N` exists (always the case at `p = 1`).
pub fn crossover(d: u64, heads: u64, p: u64) -> Option<u64> {
    if d == 0 || heads == 0 || p == 0 || !d.is_multiple_of(heads) {
        return None;
    }
    // Multiplying through by p²: 2N²D + 2ND²p² < 2N²Dp². For p ≥ 2 this
    // holds for every N > D·p²/(p² − 1) ≤ 4D/3, so 2D + 2 bounds the scan.
    let (d, p2) = (d as u128, (p * p) as u128);
    (1..=2 * d as u64 + 2).find(|&n| {
        let n = n as u128;
        2 * n * n * d + 2 * n * d * d * p2 < 2 * n * n * d * p2
    })
}

/// One attention block's closed-form and measured figures.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub label: String,
    pub tokens: u64,
    pub dim: u64,
    pub heads: u64,
    pub patch: u64,
    pub spatial_closed: u64,
    pub spatial_measured: u64,
    /// `2ND²`
    pub channel_closed: u64,
    /// `2ND²/N_h`
    pub channel_closed_per_head: u64,
    pub channel_measured: u64,
    pub mem_closed: u64,
    pub mem_measured: u64,
    /// Projection multiply-adds inside the block (not part of the closed forms).
    pub projection_measured: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitRow {
    pub label: String,
    pub attention_measured: u64,
    pub projection_measured: u64,
    pub conv_measured: u64,
    pub total_measured: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    /// Σ `2N²D/p² + 2ND²` over every attention invocation.
    pub flops_closed: u64,
    /// Σ `2N²D/p² + 2ND²/N_h`.
    pub flops_closed_per_head: u64,
    /// Instrumented multiply-adds of the attention products.
    pub flops_measured: u64,
    pub mem_closed: u64,
    pub mem_measured: u64,
    /// Every multiply-add of the decoder forward: embeddings, projections,
    /// attention, convolutions and the predictor.
    pub decoder_flops_measured: u64,
    pub breakdown: Vec<BreakdownRow>,
    /// One row per integration unit, coarsest first, then the predictor.
    pub per_unit: Vec<UnitRow>,
}

fn to_u64(label: &str, v: Exact) -> Result<u64> {
    if !v.is_integer() {
        return Err(Error::CostMismatch {
            label: label.to_string(),
            detail: format!("closed form {v} is not integral"),
        });
    }
    u64::try_from(v.to_integer()).map_err(|_| Error::CostMismatch {
        label: label.to_string(),
        detail: "closed form exceeds 64 bits".into(),
    })
}

/// Builds a report from a finished measurement and checks, per attention
/// invocation, that measured attention products and memory equal the
/// per-head closed forms exactly.
pub fn report_from_tally(tally: &Tally) -> Result<CostReport> {
    // Invocations sharing a label are summed; measured counts are per label.
    let mut labels: Vec<&str> = Vec::new();
    for call in &tally.attention_calls {
        if !labels.contains(&call.label.as_str()) {
            labels.push(&call.label);
        }
    }
    let mut breakdown = Vec::new();
    for label in labels {
        let calls: Vec<_> = tally.attention_calls.iter().filter(|c| c.label == label).collect();
        let (mut spatial, mut channel, mut channel_per_head, mut mem) = (
            Exact::from_integer(0),
            0u128,
            Exact::from_integer(0),
            Exact::from_integer(0),
        );
        for call in &calls {
            let c = vma_attention_cost(
                call.tokens as u64,
                call.dim as u64,
                call.heads as u64,
                call.patch as u64,
            )?;
            spatial += c.flops_spatial;
            channel += c.flops_channel;
            channel_per_head += c.flops_channel_per_head;
            mem += c.mem;
        }
        let first = calls[0];
        let row = BreakdownRow {
            label: label.to_string(),
            tokens: first.tokens as u64,
            dim: first.dim as u64,
            heads: first.heads as u64,
            patch: first.patch as u64,
            spatial_closed: to_u64(label, spatial)?,
            spatial_measured: tally.macs_under(label, OpClass::SpatialCore),
            channel_closed: to_u64(label, Exact::from_integer(channel))?,
            channel_closed_per_head: to_u64(label, channel_per_head)?,
            channel_measured: tally.macs_under(label, OpClass::ChannelCore),
            mem_closed: to_u64(label, mem)?,
            mem_measured: tally.mem_under(label),
            projection_measured: tally.macs_under(label, OpClass::Projection),
        };
        for (what, closed, measured) in [
            ("spatial products", row.spatial_closed, row.spatial_measured),
            ("channel products", row.channel_closed_per_head, row.channel_measured),
            ("attention memory", row.mem_closed, row.mem_measured),
        ] {
            if closed != measured {
                return Err(Error::CostMismatch {
                    label: row.label.clone(),
                    detail: format!("{what}: closed form {closed}, measured {measured}"),
                });
            }
        }
        breakdown.push(row);
    }
    let per_unit = (1..=LEVELS)
        .rev()
        .map(|level| format!("cmiu{level}"))
        .chain(["predictor".to_string()])
        .map(|label| {
            let spatial = tally.macs_under(&label, OpClass::SpatialCore);
            let channel = tally.macs_under(&label, OpClass::ChannelCore);
            let projection = tally.macs_under(&label, OpClass::Projection);
            let conv = tally.macs_under(&label, OpClass::Conv);
            let other = tally.macs_under(&label, OpClass::Other);
            UnitRow {
                label,
                attention_measured: spatial + channel,
                projection_measured: projection,
                conv_measured: conv,
                total_measured: spatial + channel + projection + conv + other,
            }
        })
        .collect();
    Ok(CostReport {
        flops_closed: breakdown.iter().map(|r| r.spatial_closed + r.channel_closed).sum(),
        flops_closed_per_head: breakdown
            .iter()
            .map(|r| r.spatial_closed + r.channel_closed_per_head)
            .sum(),
        flops_measured: tally.macs_of(OpClass::SpatialCore) + tally.macs_of(OpClass::ChannelCore),
        mem_closed: breakdown.iter().map(|r| r.mem_closed).sum(),
        mem_measured: tally.total_mem(),
        decoder_flops_measured: tally.total_macs(),
        breakdown,
        per_unit,
    })
}

/// Runs the real forward pass under the multiply-add counter.
pub fn instrument_forward(
    config: &TippConfig,
    weights: &TippWeights,
    inputs: &FeaturePyramid,
) -> Result<(tipp::SaliencyMap, CostReport)> {
    let (out, tally) = instrument::measure(|| tipp::tipp_forward(inputs, config, weights));
    let map = out?;
    Ok((map, report_from_tally(&tally)?))
}

/// One point of a patch-size sweep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepRow {
    pub patches: [usize; LEVELS],
    pub flops_closed: u64,
    pub flops_closed_per_head: u64,
    pub flops_measured: u64,
    pub decoder_flops_measured: u64,
    pub mem_closed: u64,
    pub mem_measured: u64,
    /// Level whose geometry the reference and crossover columns use.
    pub reference_level: usize,
    /// Closed-form view-mixed flops of one attention at the reference level.
    pub reference_vma_flops: u64,
    /// Standard attention flops at the reference level.
    pub reference_standard_flops: u64,
    /// Crossover token count for (D, N_h, p) at the reference level; `None`
    /// when there is none.
    pub crossover: Option<u64>,
    pub breakdown: Vec<BreakdownRow>,
}

fn sweep_row(config: &TippConfig, level: usize, r: CostReport) -> Result<SweepRow> {
    let l = config.level(level);
    let (n, d, h, p) = (
        l.tokens() as u64,
        config.dim as u64,
        config.heads as u64,
        l.patch as u64,
    );
    let vma = vma_attention_cost(n, d, h, p)?;
    Ok(SweepRow {
        patches: config.patches(),
        flops_closed: r.flops_closed,
        flops_closed_per_head: r.flops_closed_per_head,
        flops_measured: r.flops_measured,
        decoder_flops_measured: r.decoder_flops_measured,
        mem_closed: r.mem_closed,
        mem_measured: r.mem_measured,
        reference_level: level,
        reference_vma_flops: to_u64("reference", vma.flops)?,
        reference_standard_flops: to_u64(
            "reference",
            Exact::from_integer(standard_attention_cost(n, d, h)?.flops),
        )?,
        crossover: crossover(d, h, p),
        breakdown: r.breakdown,
    })
}

/// Instruments one full forward pass per patch configuration. Patch size
/// does not change parameter extents, so every point reuses `weights`.
pub fn patch_sweep(
    base: &TippConfig,
    sweep: &[[usize; LEVELS]],
    inputs: &FeaturePyramid,
    weights: &TippWeights,
) -> Result<Vec<SweepRow>> {
    sweep
        .iter()
        .map(|&patches| {
            let config = base.clone().with_patches(patches);
            config.validate()?;
            let w = weights.clone().with_patches(patches);
            let (_, r) = instrument_forward(&config, &w, inputs)?;
            sweep_row(&config, 1, r)
        })
        .collect()
}

/// Instruments a single view-mixed attention at one level's geometry,
/// with seeded tokens and parameters. The rest of the decoder is not run.
pub fn level_point(config: &TippConfig, level: usize, seed: u64) -> Result<SweepRow> {
    config.validate()?;
    let l = config.level(level);
    let mut rng = Rng::new(seed);
    let x = TokenSequence::new(rng.normal_tensor(&[l.tokens(), config.dim])?, l.h, l.w)?;
    let params = AttentionParams::random(config.dim, config.heads, l.patch, &mut rng)?;
    let section = format!("level{level}");
    let (out, tally) =
        instrument::measure(|| instrument::section(&section, || attention::view_mixed_attention(&x, &x, &params)));
    out.map_err(|e| e.at_level(level))?;
    sweep_row(config, level, report_from_tally(&tally)?)
}

/// Fixed-width plain-text table of a sweep.
pub fn sweep_table(rows: &[SweepRow], color: bool) -> String {
    let (bold, reset) = if color { ("\x1b[1m", "\x1b[0m") } else { ("", "") };
    let mut s = format!(
        "{bold}{:<12} {:>16} {:>16} {:>16} {:>18} {:>14} {:>14} {:>10}{reset}\n",
        "patches",
        "flops_closed",
        "closed_per_head",
        "flops_measured",
        "decoder_measured",
        "mem_closed",
        "mem_measured",
        "crossover"
    );
    for r in rows {
        let p = r.patches.map(|v| v.to_string()).join(",");
        let cross = r.crossover.map_or("none".to_string(), |n| n.to_string());
        s.push_str(&format!(
            "{p:<12} {:>16} {:>16} {:>16} {:>18} {:>14} {:>14} {cross:>10}\n",
            r.flops_closed,
            r.flops_closed_per_head,
            r.flops_measured,
            r.decoder_flops_measured,
            r.mem_closed,
            r.mem_measured
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{self, AttentionParams};
    use crate::ptre::TokenSequence;
    use crate::rng::Rng;

    #[test]
    fn standard_cost_cases() {
        assert_eq!(standard_attention_cost(100, 64, 2).unwrap().flops, 1_280_000);
        let one = standard_attention_cost(1, 64, 2).unwrap();
        assert_eq!((one.flops, one.mem), (128, 2 + 64));
        assert!(standard_attention_cost(4, 6, 4).is_err());
    }

    #[test]
    fn unit_patch_spatial_term_is_standard() {
        for (n, d, h) in [(16, 8, 1), (100, 64, 2), (7, 4, 4)] {
            let v = vma_attention_cost(n, d, h, 1).unwrap();
            assert_eq!(
                v.flops_spatial,
                Exact::from_integer(standard_attention_cost(n, d, h).unwrap().flops)
            );
        }
    }

    #[test]
    fn integrality_is_reported_not_fatal() {
        let v = vma_attention_cost(10, 8, 2, 2).unwrap();
        assert!(!v.integrality_violations.is_empty());
        assert_eq!(v.flops_spatial, Exact::new(2 * 100 * 8, 4));
        assert!(vma_attention_cost(64, 8, 2, 2)
            .unwrap()
            .integrality_violations
            .is_empty());
    }

    #[test]
    fn crossover_cases() {
        assert_eq!(crossover(64, 2, 8), Some(66));
        assert_eq!(crossover(64, 2, 1), None);
        assert_eq!(crossover(8, 1, 1), None);
        // Times p²: 8N² + 128N < 32N²  ⇔  N > 16/3.
        assert_eq!(crossover(4, 1, 2), Some(6));
    }

    #[test]
    fn naive_attention_run_matches_standard_cost() {
        let mut rng = Rng::new(3);
        let x = TokenSequence::new(rng.normal_tensor(&[8, 4]).unwrap(), 2, 4).unwrap();
        let p = AttentionParams::random(4, 1, 1, &mut rng).unwrap();
        let (_, tally) = instrument::measure(|| attention::standard_attention(&x, &p).unwrap());
        let c = standard_attention_cost(8, 4, 1).unwrap();
        assert_eq!(tally.macs_of(OpClass::SpatialCore) as u128, c.flops);
        assert_eq!(tally.total_mem() as u128, c.mem);
    }

    #[test]
    fn attention_core_at_16_tokens() {
        let mut rng = Rng::new(4);
        let x = TokenSequence::new(rng.normal_tensor(&[16, 8]).unwrap(), 4, 4).unwrap();
        let p = AttentionParams::random(8, 1, 1, &mut rng).unwrap();
        let (_, tally) = instrument::measure(|| attention::view_mixed_attention(&x, &x, &p).unwrap());
        assert_eq!(tally.macs_of(OpClass::SpatialCore), 4096);
        let report = report_from_tally(&tally).unwrap();
        assert_eq!(report.flops_measured, report.flops_closed_per_head);
    }

    #[test]
    fn single_token_counts_two_d() {
        let mut rng = Rng::new(5);
        let x = TokenSequence::new(rng.normal_tensor(&[1, 8]).unwrap(), 1, 1).unwrap();
        let p = AttentionParams::random(8, 1, 1, &mut rng).unwrap();
        let (_, tally) = instrument::measure(|| attention::view_mixed_attention(&x, &x, &p).unwrap());
        assert_eq!(tally.macs_of(OpClass::SpatialCore), 16);
    }
}
