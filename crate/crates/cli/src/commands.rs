//! Subcommand definitions and their implementations. Each command writes its
//! labeled results (`key: value` lines) to the supplied writer.

use std::io::Write;
use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use cstk_core::lowrank::{measure_epsilon, reduce, ReductionParams};
use cstk_core::sampling::{hierarchical_sample, random_sample, root_sample, subsample};
use cstk_core::tracker::{generate_stream, run_cat, ExecutionMode, TrainingSource};
use cstk_core::{CoresetTree, DataBlock, SampleSet, TrainParams, TreeView};

use crate::bench::{self, SvmTimeOptions};
use crate::config::ExperimentFile;
use crate::error::{CliError, CliResult};
use crate::formats::{self, BlockDocument, SnapshotDocument};

#[derive(Debug, Parser)]
#[command(name = "cstk", version, about = "Streaming coreset trees and a learn-from-summary tracking loop")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compress one feature file to at most n rows and report the measured ε.
    Reduce(ReduceArgs),
    /// Stream a feature file through a coreset tree; write its snapshot and telemetry.
    TreeBuild(TreeBuildArgs),
    /// Draw a training set from a tree snapshot.
    Sample(SampleArgs),
    /// Run the tracking loop on a synthetic stream.
    Track(TrackArgs),
    /// Measure push cost, memory or training time across stream lengths.
    Bench(BenchArgs),
    /// Compare training sources on paired seeds of one stream configuration.
    CompareSampling(CompareArgs),
}

#[derive(Debug, Args)]
pub struct ReduceArgs {
    /// Feature file (text or CSTK binary).
    pub input: PathBuf,
    /// Row budget of the summary.
    #[arg(long)]
    pub n: usize,
    /// Output block document (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// ε is measured against subspaces of codimension k (queries are d×(d−k)).
    #[arg(long = "epsilon-k", default_value_t = 1)]
    pub epsilon_k: usize,
    /// Random queries used to measure ε.
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Seed for the ε queries; chosen and printed when omitted.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TreeBuildArgs {
    /// Feature file (text or CSTK binary).
    pub input: PathBuf,
    /// Leaf size.
    #[arg(long)]
    pub n: usize,
    /// Snapshot document (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Per-push telemetry (CSV).
    #[arg(long)]
    pub telemetry: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SampleMode {
    Hierarchical,
    Root,
    Random,
    Subsample,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Snapshot written by `tree-build`.
    pub snapshot: PathBuf,
    #[arg(long, value_enum)]
    pub mode: SampleMode,
    /// Sample CSV with provenance columns.
    #[arg(long)]
    pub out: PathBuf,
    /// Seed for `random`; chosen and printed when omitted.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Raw stream for the `random` and `subsample` baselines; without it they
    /// draw from the rows the snapshot stores.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

/// A fixed detection threshold, or `trained` for each model's own.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdArg {
    Trained,
    Fixed(f64),
}

fn parse_threshold(s: &str) -> Result<ThresholdArg, String> {
    if s == "trained" {
        return Ok(ThresholdArg::Trained);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(ThresholdArg::Fixed(v)),
        _ => Err(format!("expected a finite number or 'trained', got '{s}'")),
    }
}

/// Overrides for the tracker section of an experiment file.
#[derive(Debug, Args, Default)]
pub struct TrackerFlags {
    /// Leaf size and bootstrap length.
    #[arg(long)]
    pub n: Option<usize>,
    /// One-class outlier fraction ν in (0, 1].
    #[arg(long)]
    pub nu: Option<f64>,
    /// Regularization λ.
    #[arg(long)]
    pub reg: Option<f64>,
    /// Training iterations.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Detection threshold (number, or `trained`).
    #[arg(long, value_parser = parse_threshold)]
    pub threshold: Option<ThresholdArg>,
    /// Non-maximum suppression radius (default: the grid spacing).
    #[arg(long)]
    pub radius: Option<f64>,
    /// Frames between EM refits of the Kalman noise (default: n).
    #[arg(long = "em-every")]
    pub em_every: Option<usize>,
}

impl TrackerFlags {
    fn apply(&self, file: &mut ExperimentFile) {
        let t = &mut file.tracker;
        if let Some(n) = self.n {
            t.n = n;
        }
        if let Some(nu) = self.nu {
            t.nu = nu;
        }
        if let Some(reg) = self.reg {
            t.reg = reg;
        }
        if let Some(iters) = self.iters {
            t.iters = iters;
        }
        match self.threshold {
            Some(ThresholdArg::Trained) => t.threshold = None,
            Some(ThresholdArg::Fixed(v)) => t.threshold = Some(v),
            None => {}
        }
        if let Some(radius) = self.radius {
            t.radius = Some(radius);
        }
        if let Some(em) = self.em_every {
            t.em_every = Some(em);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SourceArg {
    Hierarchical,
    Root,
    Random,
    Subsample,
}

impl From<SourceArg> for TrainingSource {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::Hierarchical => TrainingSource::Hierarchical,
            SourceArg::Root => TrainingSource::Root,
            SourceArg::Random => TrainingSource::Random,
            SourceArg::Subsample => TrainingSource::Subsample,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    /// Experiment file (JSON with `stream` and `tracker` sections).
    pub config: PathBuf,
    /// Per-frame run table (CSV).
    #[arg(long)]
    pub out: PathBuf,
    /// Stream seed; overrides the file's.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training source.
    #[arg(long, value_enum)]
    pub mode: Option<SourceArg>,
    /// Run classification, compression and training on separate threads.
    #[arg(long)]
    pub concurrent: bool,
    #[command(flatten)]
    pub tracker: TrackerFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchMode {
    Time,
    Space,
    SvmTime,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(value_enum)]
    pub mode: BenchMode,
    /// Leaf size.
    #[arg(long, default_value_t = 32)]
    pub n: usize,
    /// Feature dimension of the generated rows.
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Stream lengths, comma separated. Default: n·2^4 … n·2^12 for time and
    /// space; 1000,10000,100000 for svm-time.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Timing repetitions per size (median reported; svm-time only).
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    /// Skip training on every streamed row (svm-time only).
    #[arg(long)]
    pub sample_only: bool,
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long)]
    pub reg: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// CSV destination; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Experiment file (JSON with `stream` and `tracker` sections).
    pub config: PathBuf,
    /// Leaf sizes, comma separated (default: the file's).
    #[arg(long, value_delimiter = ',')]
    pub n: Option<Vec<usize>>,
    /// Stream seeds: a range `a..b` (inclusive) or a comma-separated list.
    #[arg(long, default_value = "1..10")]
    pub seeds: String,
    /// Per-seed and mean success rates (CSV).
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Reduce(a) => cmd_reduce(&a, out),
        Command::TreeBuild(a) => cmd_tree_build(&a, out),
        Command::Sample(a) => cmd_sample(&a, out),
        Command::Track(a) => cmd_track(&a, out),
        Command::Bench(a) => cmd_bench(&a, out),
        Command::CompareSampling(a) => cmd_compare_sampling(&a, out),
    }
}

fn say(out: &mut dyn Write, line: std::fmt::Arguments<'_>) -> CliResult<()> {
    writeln!(out, "{line}").map_err(|e| CliError::internal(format!("standard output: {e}")))
}

fn chosen_seed(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(0)
    })
}

pub fn cmd_reduce(args: &ReduceArgs, out: &mut dyn Write) -> CliResult<()> {
    let input = formats::read_features(&args.input)?.to_block()?;
    let params = ReductionParams::new(args.n, args.epsilon_k, input.dim(), 0.1)?;
    if args.trials == 0 {
        return Err(CliError::usage("--trials must be ≥ 1"));
    }
    let seed = chosen_seed(args.seed);
    let summary = reduce(&input, &params)?;
    let eps = measure_epsilon(&input, &summary, args.epsilon_k, args.trials, seed)?;
    formats::write_bytes(
        &args.out,
        formats::to_json(&BlockDocument::from_block(&summary))?.as_bytes(),
    )?;
    say(out, format_args!("seed: {seed}"))?;
    say(out, format_args!("rows: {}", input.rows()))?;
    say(out, format_args!("kept_rows: {}", summary.rows()))?;
    say(out, format_args!("c: {:e}", summary.c()))?;
    say(out, format_args!("epsilon: {eps:e}"))
}

pub fn cmd_tree_build(args: &TreeBuildArgs, out: &mut dyn Write) -> CliResult<()> {
    let input = formats::read_features(&args.input)?;
    if input.rows == 0 {
        return Err(CliError::usage(format!(
            "{}: input holds no rows; nothing to summarize",
            args.input.display()
        )));
    }
    let mut tree = CoresetTree::new(args.n, input.dim)?;
    for i in 0..input.rows {
        tree.push_point(input.row(i))?;
    }
    let snapshot = SnapshotDocument::from_view(&tree.snapshot());
    formats::write_bytes(&args.out, formats::to_json(&snapshot)?.as_bytes())?;
    let telemetry = formats::telemetry_from_stats(tree.telemetry());
    formats::write_bytes(&args.telemetry, formats::encode_telemetry(&telemetry).as_bytes())?;
    say(out, format_args!("points: {}", tree.points_seen()))?;
    say(out, format_args!("leaves: {}", tree.leaves_seen()))?;
    say(out, format_args!("live_nodes: {}", tree.live_node_count()))?;
    say(out, format_args!("max_live_nodes: {}", tree.max_live_nodes()))?;
    say(out, format_args!("merges: {}", tree.merge_count()))?;
    say(out, format_args!("pending: {}", tree.pending().len()))
}

/// Every row the view stores: nodes from the bottom of the stack, then pending.
fn stored_rows(view: &TreeView) -> CliResult<DataBlock> {
    let mut data = Vec::new();
    for node in view.nodes() {
        data.extend(node.summary().block().to_row_major());
    }
    if let Some(p) = view.pending().to_block() {
        data.extend(p.to_row_major());
    }
    let rows = data.len() / view.dim();
    Ok(DataBlock::from_row_slice(rows, view.dim(), &data)?)
}

pub fn cmd_sample(args: &SampleArgs, out: &mut dyn Write) -> CliResult<()> {
    let view = formats::read_snapshot(&args.snapshot)?;
    if view.is_empty() {
        return Err(CliError::usage("snapshot holds no data"));
    }
    let n = view.n();
    let history = |view: &TreeView| -> CliResult<DataBlock> {
        match &args.history {
            Some(path) => {
                let m = formats::read_features(path)?;
                if m.dim != view.dim() {
                    return Err(CliError::usage(format!(
                        "history dimension {} does not match snapshot dimension {}",
                        m.dim,
                        view.dim()
                    )));
                }
                m.to_block()
            }
            None => stored_rows(view),
        }
    };
    let mut seed_used = None;
    let (sample, bound): (SampleSet, usize) = match args.mode {
        SampleMode::Hierarchical => (hierarchical_sample(&view)?, 2 * n),
        SampleMode::Root => (root_sample(&view)?, n),
        SampleMode::Random => {
            let seed = chosen_seed(args.seed);
            seed_used = Some(seed);
            (random_sample(&history(&view)?, n, seed)?, n)
        }
        SampleMode::Subsample => (subsample(&history(&view)?, n)?, n),
    };
    formats::write_bytes(&args.out, formats::encode_sample(&sample, bound).as_bytes())?;
    if let Some(seed) = seed_used {
        say(out, format_args!("seed: {seed}"))?;
    }
    say(out, format_args!("rows: {}", sample.len()))?;
    say(out, format_args!("bound: {bound}"))
}

pub fn cmd_track(args: &TrackArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut file = ExperimentFile::load(&args.config)?;
    args.tracker.apply(&mut file);
    if let Some(seed) = args.seed {
        file.stream.seed = seed;
    }
    let mut cfg = file.tracker_config()?;
    if let Some(source) = args.mode {
        cfg.source = source.into();
    }
    if args.concurrent {
        cfg.mode = ExecutionMode::Concurrent;
    }
    let frames = generate_stream(&file.stream)?;
    let run = run_cat(&frames, &cfg)?;
    formats::write_bytes(&args.out, formats::encode_run(&run).as_bytes())?;
    say(out, format_args!("seed: {}", file.stream.seed))?;
    say(out, format_args!("frames: {}", run.records.len()))?;
    say(out, format_args!("models_trained: {}", run.models_trained))?;
    say(out, format_args!("success_rate: {:.3}", run.success_rate))
}

pub fn cmd_bench(args: &BenchArgs, out: &mut dyn Write) -> CliResult<()> {
    if args.n == 0 || args.dim == 0 {
        return Err(CliError::usage("--n and --dim must be ≥ 1"));
    }
    let csv = match args.mode {
        BenchMode::Time | BenchMode::Space => {
            let sizes = args
                .sizes
                .clone()
                .unwrap_or_else(|| bench::doubling_grid(args.n, 4, 12));
            let rows = bench::sweep_stream(args.n, args.dim, &sizes, args.seed)?;
            if args.mode == BenchMode::Time {
                bench::encode_time(&rows)
            } else {
                bench::encode_space(&rows)
            }
        }
        BenchMode::SvmTime => {
            let sizes = args.sizes.clone().unwrap_or_else(|| vec![1_000, 10_000, 100_000]);
            let defaults = TrainParams::default();
            let params = TrainParams {
                nu: args.nu.unwrap_or(defaults.nu),
                regularization: args.reg.unwrap_or(defaults.regularization),
                iterations: args.iters.unwrap_or(defaults.iterations),
                ..defaults
            };
            params.validate()?;
            let opts = SvmTimeOptions {
                n: args.n,
                dim: args.dim,
                params,
                reps: args.reps,
                all_data_reps: if args.sample_only { 0 } else { args.reps },
                seed: args.seed,
            };
            bench::encode_svm_time(&bench::sweep_training(&sizes, &opts)?)
        }
    };
    match &args.out {
        Some(path) => {
            formats::write_bytes(path, csv.as_bytes())?;
            say(out, format_args!("seed: {}", args.seed))?;
            say(out, format_args!("wrote: {}", path.display()))
        }
        None => out
            .write_all(csv.as_bytes())
            .map_err(|e| CliError::internal(format!("standard output: {e}"))),
    }
}

pub fn parse_seeds(spec: &str) -> CliResult<Vec<u64>> {
    let bad = || CliError::usage(format!("cannot parse seeds '{spec}'; use a..b or a,b,c"));
    let seeds: Vec<u64> = if let Some((a, b)) = spec.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        (a..=b).collect()
    } else {
        spec.split(',')
            .map(|s| s.trim().parse().map_err(|_| bad()))
            .collect::<CliResult<_>>()?
    };
    if seeds.len() < 2 {
        return Err(CliError::usage("comparison needs at least 2 seeds"));
    }
    Ok(seeds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub n: usize,
    pub seed: u64,
    pub source: TrainingSource,
    pub success_rate: f64,
}

/// Runs every training source on the same stream for each `(n, seed)`.
pub fn compare_sampling(file: &ExperimentFile, ns: &[usize], seeds: &[u64]) -> CliResult<Vec<ComparisonRow>> {
    let mut rows = Vec::new();
    for &n in ns {
        for &seed in seeds {
            let mut f = file.clone();
            f.stream.seed = seed;
            f.tracker.n = n;
            f.tracker.sample_seed = seed;
            let frames = generate_stream(&f.stream)?;
            let base = f.tracker_config()?;
            for source in TrainingSource::ALL {
                let mut cfg = base.clone();
                cfg.source = source;
                let run = run_cat(&frames, &cfg)?;
                rows.push(ComparisonRow {
                    n,
                    seed,
                    source,
                    success_rate: run.success_rate,
                });
            }
        }
    }
    Ok(rows)
}

pub fn mean_rate(rows: &[ComparisonRow], n: usize, source: TrainingSource) -> f64 {
    let picked: Vec<f64> = rows
        .iter()
        .filter(|r| r.n == n && r.source == source)
        .map(|r| r.success_rate)
        .collect();
    picked.iter().sum::<f64>() / picked.len().max(1) as f64
}

/// Seeds (at leaf size `n`) where `a` scored at least as well as `b`.
pub fn seeds_at_least(rows: &[ComparisonRow], n: usize, a: TrainingSource, b: TrainingSource) -> (usize, usize) {
    let rate = |seed: u64, s: TrainingSource| {
        rows.iter()
            .find(|r| r.n == n && r.seed == seed && r.source == s)
            .map(|r| r.success_rate)
    };
    let mut seeds: Vec<u64> = rows.iter().filter(|r| r.n == n).map(|r| r.seed).collect();
    seeds.dedup();
    let wins = seeds
        .iter()
        .filter(|&&s| matches!((rate(s, a), rate(s, b)), (Some(x), Some(y)) if x >= y))
        .count();
    (wins, seeds.len())
}

pub fn cmd_compare_sampling(args: &CompareArgs, out: &mut dyn Write) -> CliResult<()> {
    let file = ExperimentFile::load(&args.config)?;
    let seeds = parse_seeds(&args.seeds)?;
    let ns = args.n.clone().unwrap_or_else(|| vec![file.tracker.n]);
    let rows = compare_sampling(&file, &ns, &seeds)?;

    let mut csv = String::from("n,seed,method,success_rate\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{}\n", r.n, r.seed, r.source.name(), r.success_rate));
    }
    for &n in &ns {
        for source in TrainingSource::ALL {
            csv.push_str(&format!("{n},mean,{},{}\n", source.name(), mean_rate(&rows, n, source)));
        }
    }
    formats::write_bytes(&args.out, csv.as_bytes())?;

    use TrainingSource::*;
    for &n in &ns {
        let means: Vec<String> = TrainingSource::ALL
            .iter()
            .map(|&s| format!("{}={:.4}", s.name(), mean_rate(&rows, n, s)))
            .collect();
        say(out, format_args!("n={n}: {}", means.join(" ")))?;
        for (a, b) in [(Hierarchical, Subsample), (Subsample, Random), (Hierarchical, Root)] {
            let (wins, total) = seeds_at_least(&rows, n, a, b);
            say(out, format_args!("n={n}: {} >= {} on {wins}/{total} seeds", a.name(), b.name()))?;
        }
    }
    Ok(())
}
