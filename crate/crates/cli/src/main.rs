//! `viewmix`: batch frontend for forward passes, cost tables, the self-check
//! suite and attention dumps.
//!
//! Every command computes its artifacts in memory first and writes them
//! with atomic renames, so an error leaves `failure.txt` instead of a
//! truncated tensor file.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use viewmix::instrument;
use viewmix::io;
use viewmix::tipp::{self, FeaturePyramid, TippConfig, TippWeights, LEVELS};
use viewmix::verify::{self, CheckOptions};
use viewmix::{cost, weights};

const FAILURE_REPORT: &str = "failure.txt";
const DEFAULT_SEED: u64 = 42;
const DEFAULT_SWEEP: [[usize; LEVELS]; 3] = [[2; LEVELS], [4; LEVELS], [8; LEVELS]];

#[derive(Parser, Debug)]
#[command(
    name = "viewmix",
    version,
    about = "View-mixed transformer decoder: forward, cost, check, dump"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for synthetic inputs and weights.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Patch sizes p1,p2,p3,p4.
    #[arg(long, global = true, value_parser = parse_patches)]
    patch: Option<[usize; LEVELS]>,
    /// Embedding width D.
    #[arg(long, global = true)]
    dim: Option<usize>,
    /// Attention heads.
    #[arg(long, global = true)]
    heads: Option<usize>,
    /// Input extents H,W; the pyramid is H/4, H/8, H/16, H/32.
    #[arg(long, global = true, value_parser = parse_extent)]
    input_size: Option<(usize, usize)>,
    /// Directory of level{i}_{rgb,dt}.cavr feature files.
    #[arg(long, global = true)]
    inputs: Option<PathBuf>,
    /// Directory of weight tensors with a manifest.
    #[arg(long, global = true)]
    weights: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the decoder and write the saliency map and a shape trace.
    Forward,
    /// Write a cost table across a patch-size sweep.
    Cost {
        /// Sweep points separated by ';', e.g. "2,2,2,2;8,8,8,8".
        #[arg(long, value_parser = parse_sweep)]
        sweep: Option<Sweep>,
        /// Instrument a single attention at this level's geometry instead
        /// of the full decoder.
        #[arg(long)]
        level: Option<usize>,
    },
    /// Run the property and oracle suite.
    Check {
        /// Reverse the spatial softmax scale inside production kernels.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Dump softmax maps and per-query rows of one attention block.
    DumpAttn {
        #[arg(long)]
        level: usize,
        /// imsa_rgb, imsa_dt, imca_rgb, imca_dt or cssa.
        #[arg(long)]
        block: String,
        /// Query token (patch) index whose spatial row is dumped.
        #[arg(long, default_values_t = [0usize])]
        query: Vec<usize>,
    },
    /// Write seeded synthetic features and weights as CAVR directories.
    Export,
}

/// Run configuration file. Every field is optional.
#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    input_seed: Option<u64>,
    weight_seed: Option<u64>,
    inputs: Option<PathBuf>,
    weights: Option<PathBuf>,
    out: Option<PathBuf>,
    input_size: Option<[usize; 2]>,
    channels: Option<[usize; LEVELS]>,
    patches: Option<[usize; LEVELS]>,
    dim: Option<usize>,
    heads: Option<usize>,
    sweep: Option<Vec<[usize; LEVELS]>>,
}

enum Source {
    Seed(u64),
    Dir(PathBuf),
}

struct Run {
    config: TippConfig,
    inputs: Source,
    weights: Source,
    out: PathBuf,
    sweep: Vec<[usize; LEVELS]>,
    seed: u64,
}

fn parse_list(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(|v| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}")))
        .collect()
}

fn parse_patches(s: &str) -> Result<[usize; LEVELS], String> {
    let v = parse_list(s)?;
    v.try_into()
        .map_err(|v: Vec<usize>| format!("expected {LEVELS} patch sizes, got {}", v.len()))
}

#[derive(Debug, Clone)]
struct Sweep(Vec<[usize; LEVELS]>);

fn parse_sweep(s: &str) -> Result<Sweep, String> {
    s.split(';').map(parse_patches).collect::<Result<_, _>>().map(Sweep)
}

fn parse_extent(s: &str) -> Result<(usize, usize), String> {
    match *parse_list(s)?.as_slice() {
        [h, w] => Ok((h, w)),
        [side] => Ok((side, side)),
        _ => Err("expected H,W".into()),
    }
}

fn read_file_config(args: &CommonArgs) -> Result<FileConfig> {
    let Some(path) = &args.config else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Flags over file over defaults.
fn resolve(args: &CommonArgs, command_sweep: Option<&Vec<[usize; LEVELS]>>) -> Result<Run> {
    let file = read_file_config(args)?;
    let base = TippConfig::default();
    let seed = args.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
    let source = |flag: &Option<PathBuf>, dir: &Option<PathBuf>, own_seed: Option<u64>, what: &str| -> Result<Source> {
        if let Some(d) = flag {
            return Ok(Source::Dir(d.clone()));
        }
        match (dir, own_seed) {
            (Some(_), Some(_)) => bail!("config names both a {what} directory and a {what} seed; give exactly one"),
            (Some(d), None) => Ok(Source::Dir(d.clone())),
            (None, s) => Ok(Source::Seed(args.seed.or(s).unwrap_or(seed))),
        }
    };
    let inputs = source(&args.inputs, &file.inputs, file.input_seed, "input")?;
    let weights = source(&args.weights, &file.weights, file.weight_seed, "weight")?;
    let (h, w) = args
        .input_size
        .or(file.input_size.map(|[h, w]| (h, w)))
        .unwrap_or((base.input_h, base.input_w));
    let channels = file.channels.unwrap_or(base.levels.map(|l| l.channels));
    let patches = args.patch.or(file.patches).unwrap_or(base.patches());
    let dim = args.dim.or(file.dim).unwrap_or(base.dim);
    let heads = args.heads.or(file.heads).unwrap_or(base.heads);
    let config = TippConfig::new(h, w, channels, patches, dim, heads);
    config.validate()?;
    let sweep = command_sweep.cloned().or(file.sweep).unwrap_or(DEFAULT_SWEEP.to_vec());
    Ok(Run {
        config,
        inputs,
        weights,
        out: args.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from("out")),
        sweep,
        seed,
    })
}

fn load_inputs(run: &Run) -> Result<FeaturePyramid> {
    Ok(match &run.inputs {
        Source::Seed(s) => FeaturePyramid::synthetic(&run.config, *s)?,
        Source::Dir(d) => {
            FeaturePyramid::load_dir(d).with_context(|| format!("loading features from {}", d.display()))?
        }
    })
}

fn load_weights(run: &Run) -> Result<TippWeights> {
    Ok(match &run.weights {
        Source::Seed(s) => weights::init_weights(&run.config, *s)?,
        Source::Dir(d) => {
            weights::load_weights(&run.config, d).with_context(|| format!("loading weights from {}", d.display()))?
        }
    })
}

fn color() -> bool {
    std::env::var_os("CAVER_NO_COLOR").is_none()
}

type Artifacts = Vec<(String, Vec<u8>)>;

fn cmd_forward(run: &Run) -> Result<Artifacts> {
    let features = load_inputs(run)?;
    let w = load_weights(run)?;
    let (map, tally) = instrument::measure(|| tipp::tipp_forward(&features, &run.config, &w));
    let map = map?;
    let mut trace = String::new();
    for e in &tally.shapes {
        trace.push_str(&format!("{} {:?} -> {:?}\n", e.label, e.input, e.output));
    }
    let (h, w) = map.extent();
    println!(
        "saliency {h}x{w}, range [{:.6}, {:.6}]",
        map.values().min_value(),
        map.values().max_value()
    );
    Ok(vec![
        ("saliency.cavr".into(), io::encode_cavr(map.values())),
        ("saliency.pgm".into(), io::pgm_unit(map.values())?),
        ("trace.log".into(), trace.into_bytes()),
    ])
}

fn cmd_cost(run: &Run, level: Option<usize>) -> Result<Artifacts> {
    let rows = match level {
        Some(l) => {
            if !(1..=LEVELS).contains(&l) {
                bail!("level {l} outside 1..={LEVELS}");
            }
            vec![cost::level_point(&run.config, l, run.seed)?]
        }
        None => {
            for &p in &run.sweep {
                run.config.clone().with_patches(p).validate()?;
            }
            let features = load_inputs(run)?;
            let w = load_weights(run)?;
            cost::patch_sweep(&run.config, &run.sweep, &features, &w)?
        }
    };
    print!("{}", cost::sweep_table(&rows, color()));
    let json = serde_json::to_string_pretty(&rows)?;
    Ok(vec![
        ("cost.txt".into(), cost::sweep_table(&rows, false).into_bytes()),
        ("cost.json".into(), (json + "\n").into_bytes()),
    ])
}

#[derive(Serialize)]
struct CheckSummary<'a> {
    passed: bool,
    fault_injected: bool,
    checks: &'a [verify::CheckOutcome],
}

fn cmd_check(run: &Run, inject_fault: bool) -> Result<(Artifacts, bool)> {
    let opts = CheckOptions {
        seed: run.seed,
        inject_spatial_scale_fault: inject_fault,
        counterexample_dir: Some(run.out.join("counterexamples")),
    };
    let outcomes = verify::run_checks(&opts)?;
    let (green, red, reset) = if color() {
        ("\x1b[32m", "\x1b[31m", "\x1b[0m")
    } else {
        ("", "", "")
    };
    for o in &outcomes {
        let (tag, c) = if o.passed { ("PASS", green) } else { ("FAIL", red) };
        println!("{c}{tag}{reset}  {:<26} {}", o.name, o.detail);
    }
    let passed = outcomes.iter().all(|o| o.passed);
    let summary = CheckSummary {
        passed,
        fault_injected: inject_fault,
        checks: &outcomes,
    };
    let json = serde_json::to_string_pretty(&summary)? + "\n";
    Ok((vec![("check.json".into(), json.into_bytes())], passed))
}

fn block_label(level: usize, block: &str) -> Result<String> {
    if !(1..=LEVELS).contains(&level) {
        bail!("level {level} outside 1..={LEVELS}");
    }
    let inner = match block {
        "imsa_rgb" | "imsa_dt" | "cssa" => block.to_string(),
        "imca_rgb" => format!("imca.{}", viewmix::blocks::RGB_QUERY),
        "imca_dt" => format!("imca.{}", viewmix::blocks::DT_QUERY),
        _ => bail!("unknown block {block:?}; expected imsa_rgb, imsa_dt, imca_rgb, imca_dt or cssa"),
    };
    Ok(format!("cmiu{level}.{inner}"))
}

fn cmd_dump(run: &Run, level: usize, block: &str, queries: &[usize]) -> Result<Artifacts> {
    let label = block_label(level, block)?;
    let l = run.config.level(level);
    let (gh, gw) = (l.h / l.patch, l.w / l.patch);
    if let Some(&q) = queries.iter().find(|&&q| q >= gh * gw) {
        bail!("query {q} outside the {gh}x{gw} patch grid of level {level}");
    }
    let features = load_inputs(run)?;
    let w = load_weights(run)?;
    let (out, tally) = instrument::measure_capturing(Some(&label), || tipp::tipp_forward(&features, &run.config, &w));
    out?;
    let cap = tally
        .captures
        .first()
        .ok_or_else(|| anyhow!("block {label} produced no attention maps"))?;
    let mut files = Vec::new();
    for (h, (s, c)) in cap.spatial.iter().zip(&cap.channel).enumerate() {
        files.push((format!("spatial_h{h}.cavr"), io::encode_cavr(s)));
        files.push((format!("spatial_h{h}.pgm"), io::pgm_minmax(s)?));
        files.push((format!("channel_h{h}.cavr"), io::encode_cavr(c)));
        files.push((format!("channel_h{h}.pgm"), io::pgm_minmax(c)?));
        let n = s.shape()[1];
        for &q in queries {
            let row = viewmix::Tensor::new(&[gh, gw], s.data()[q * n..(q + 1) * n].to_vec())?;
            files.push((format!("spatial_h{h}_q{q}.cavr"), io::encode_cavr(&row)));
            files.push((format!("spatial_h{h}_q{q}.pgm"), io::pgm_minmax(&row)?));
        }
    }
    println!(
        "{label}: {} heads, spatial {}x{}, channel {}x{}",
        cap.spatial.len(),
        gh * gw,
        gh * gw,
        cap.channel[0].shape()[0],
        cap.channel[0].shape()[1]
    );
    Ok(files)
}

fn cmd_export(run: &Run) -> Result<()> {
    let features = load_inputs(run)?;
    let w = load_weights(run)?;
    features.save_dir(&run.out.join("features"))?;
    weights::save_weights(&w, &run.out.join("weights"))?;
    println!(
        "wrote {} and {}",
        run.out.join("features").display(),
        run.out.join("weights").display()
    );
    Ok(())
}

fn write_artifacts(out: &Path, files: &Artifacts) -> Result<()> {
    for (name, bytes) in files {
        io::write_atomic(&out.join(name), bytes)?;
    }
    let stale = out.join(FAILURE_REPORT);
    if stale.exists() {
        std::fs::remove_file(&stale).with_context(|| format!("removing {}", stale.display()))?;
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<bool> {
    let sweep = match &cli.command {
        Command::Cost { sweep, .. } => sweep.as_ref().map(|s| &s.0),
        _ => None,
    };
    let run = resolve(&cli.common, sweep)?;
    std::fs::create_dir_all(&run.out).with_context(|| format!("creating {}", run.out.display()))?;
    let (files, ok) = match &cli.command {
        Command::Forward => (cmd_forward(&run)?, true),
        Command::Cost { level, .. } => (cmd_cost(&run, *level)?, true),
        Command::Check { inject_fault } => cmd_check(&run, *inject_fault)?,
        Command::DumpAttn { level, block, query } => (cmd_dump(&run, *level, block, query)?, true),
        Command::Export => {
            cmd_export(&run)?;
            (Vec::new(), true)
        }
    };
    write_artifacts(&run.out, &files)?;
    Ok(ok)
}

/// Best-effort failure report in the configured output directory.
fn report_failure(cli: &Cli, err: &anyhow::Error) {
    let from_file = read_file_config(&cli.common).ok().and_then(|f| f.out);
    let out = cli
        .common
        .out
        .clone()
        .or(from_file)
        .unwrap_or_else(|| PathBuf::from("out"));
    if std::fs::create_dir_all(&out).is_ok() {
        let _ = io::write_atomic(&out.join(FAILURE_REPORT), format!("error: {err:#}\n").as_bytes());
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            report_failure(&cli, &e);
            ExitCode::FAILURE
        }
    }
}
