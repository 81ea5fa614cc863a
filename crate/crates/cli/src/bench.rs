//! Measurement sweeps over stream length: per-push cost, memory (live
//! nodes) and classifier training time. Everything runs on the calling
//! thread so timings are not perturbed by the pipeline's worker threads.

use std::fmt::Write as _;
use std::time::Instant;

use cstk_core::classifier::train_one_class;
use cstk_core::sampling::hierarchical_sample;
use cstk_core::tree::live_node_bound;
use cstk_core::{CoresetTree, DataBlock, TrainParams, TreeView};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::CliResult;

/// Reproducible synthetic feature rows: standard normal around a shared
/// offset, so a one-class model has a direction to find.
pub struct RowSource {
    rng: ChaCha8Rng,
    dim: usize,
}

impl RowSource {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dim,
        }
    }

    pub fn next_row(&mut self) -> Vec<f64> {
        (0..self.dim)
            .map(|_| 1.0 + self.rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

/// `n·2^j` for `j` in `lo..=hi`.
pub fn doubling_grid(n: usize, lo: u32, hi: u32) -> Vec<usize> {
    (lo..=hi).map(|j| n << j).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamMeasurement {
    pub points: usize,
    pub leaves: usize,
    pub total_push_ns: u64,
    pub max_push_ns: u64,
    pub merges: u64,
    pub max_merges_in_push: u32,
    pub max_live_nodes: usize,
    pub final_live_nodes: usize,
}

impl StreamMeasurement {
    pub fn amortized_push_ns(&self) -> f64 {
        self.total_push_ns as f64 / self.points as f64
    }

    pub fn merges_per_push(&self) -> f64 {
        self.merges as f64 / self.points as f64
    }

    /// `⌊log₂ L⌋ + 1`.
    pub fn live_bound(&self) -> usize {
        live_node_bound(self.leaves.max(1))
    }
}

/// Streams `points` fresh rows into an empty tree and reports its counters.
pub fn measure_stream(n: usize, dim: usize, points: usize, seed: u64) -> CliResult<StreamMeasurement> {
    let mut tree = CoresetTree::new(n, dim)?;
    let mut rows = RowSource::new(dim, seed);
    for _ in 0..points {
        tree.push_point(&rows.next_row())?;
    }
    let stats = tree.telemetry();
    Ok(StreamMeasurement {
        points,
        leaves: tree.leaves_seen(),
        total_push_ns: stats.push_nanos.iter().sum(),
        max_push_ns: stats.push_nanos.iter().copied().max().unwrap_or(0),
        merges: tree.merge_count(),
        max_merges_in_push: stats.merges_per_push.iter().copied().max().unwrap_or(0),
        max_live_nodes: tree.max_live_nodes(),
        final_live_nodes: tree.live_node_count(),
    })
}

pub fn sweep_stream(n: usize, dim: usize, sizes: &[usize], seed: u64) -> CliResult<Vec<StreamMeasurement>> {
    sizes.iter().map(|&p| measure_stream(n, dim, p, seed)).collect()
}

pub fn encode_time(rows: &[StreamMeasurement]) -> String {
    let mut out = String::from(
        "points,leaves,total_push_ns,amortized_push_ns,max_push_ns,merges,merges_per_push,max_merges_in_push\n",
    );
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.points,
            r.leaves,
            r.total_push_ns,
            r.amortized_push_ns(),
            r.max_push_ns,
            r.merges,
            r.merges_per_push(),
            r.max_merges_in_push
        )
        .expect("writing to a String");
    }
    out
}

pub fn encode_space(rows: &[StreamMeasurement]) -> String {
    let mut out = String::from("points,leaves,max_live_nodes,final_live_nodes,live_bound\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.points,
            r.leaves,
            r.max_live_nodes,
            r.final_live_nodes,
            r.live_bound()
        )
        .expect("writing to a String");
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainMeasurement {
    pub points: usize,
    pub sample_rows: usize,
    /// Median over repetitions.
    pub sample_train_ns: u64,
    pub all_rows: usize,
    pub all_train_ns: Option<u64>,
}

/// Median of `reps` timed calls after one untimed warm-up call.
fn median_ns(reps: usize, mut f: impl FnMut() -> CliResult<()>) -> CliResult<u64> {
    f()?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps.max(1) {
        let started = Instant::now();
        f()?;
        times.push(started.elapsed().as_nanos() as u64);
    }
    times.sort_unstable();
    Ok(times[times.len() / 2])
}

pub struct SvmTimeOptions {
    pub n: usize,
    pub dim: usize,
    pub params: TrainParams,
    /// Timed repetitions of sample training.
    pub reps: usize,
    /// Timed repetitions of training on every streamed row; 0 skips it.
    pub all_data_reps: usize,
    pub seed: u64,
}

struct Prepared {
    points: usize,
    sample: DataBlock,
    all: Option<DataBlock>,
}

/// Streams `points` rows and keeps the hierarchical sample of the tree as it
/// stood at the last completed leaf, plus every row when all-data timing is on.
fn prepare(points: usize, opts: &SvmTimeOptions) -> CliResult<Prepared> {
    let mut tree = CoresetTree::new(opts.n, opts.dim)?.without_series();
    let mut source = RowSource::new(opts.dim, opts.seed);
    let mut history = Vec::with_capacity(if opts.all_data_reps > 0 { points * opts.dim } else { 0 });
    let mut at_leaf: Option<TreeView> = None;
    for _ in 0..points {
        let row = source.next_row();
        if opts.all_data_reps > 0 {
            history.extend_from_slice(&row);
        }
        if tree.push_point(&row)?.leaf_formed {
            at_leaf = Some(tree.snapshot());
        }
    }
    let view = at_leaf.unwrap_or_else(|| tree.snapshot());
    let sample = hierarchical_sample(&view)?.rows().clone();
    let all = if opts.all_data_reps > 0 {
        Some(DataBlock::from_row_slice(points, opts.dim, &history)?)
    } else {
        None
    };
    Ok(Prepared { points, sample, all })
}

fn time_training(rows: &DataBlock, params: &TrainParams) -> CliResult<u64> {
    let started = Instant::now();
    train_one_class(rows, params)?;
    Ok(started.elapsed().as_nanos() as u64)
}

fn median(mut times: Vec<u64>) -> u64 {
    times.sort_unstable();
    times[times.len() / 2]
}

pub fn measure_training(points: usize, opts: &SvmTimeOptions) -> CliResult<TrainMeasurement> {
    Ok(sweep_training(&[points], opts)?.remove(0))
}

/// Sample-training times are taken round-robin across all sizes, after one
/// warm-up pass, so slow drift in machine speed affects every size alike.
pub fn sweep_training(sizes: &[usize], opts: &SvmTimeOptions) -> CliResult<Vec<TrainMeasurement>> {
    let prepared = sizes.iter().map(|&p| prepare(p, opts)).collect::<CliResult<Vec<_>>>()?;
    let reps = opts.reps.max(1);
    let mut sample_times = vec![Vec::with_capacity(reps); prepared.len()];
    for rep in 0..=reps {
        for (slot, prep) in sample_times.iter_mut().zip(&prepared) {
            let t = time_training(&prep.sample, &opts.params)?;
            if rep > 0 {
                slot.push(t);
            }
        }
    }
    prepared
        .iter()
        .zip(sample_times)
        .map(|(prep, times)| {
            let all_train_ns = match &prep.all {
                Some(all) => Some(median_ns(opts.all_data_reps, || {
                    train_one_class(all, &opts.params)?;
                    Ok(())
                })?),
                None => None,
            };
            Ok(TrainMeasurement {
                points: prep.points,
                sample_rows: prep.sample.rows(),
                sample_train_ns: median(times),
                all_rows: prep.points,
                all_train_ns,
            })
        })
        .collect()
}

pub fn encode_svm_time(rows: &[TrainMeasurement]) -> String {
    let mut out = String::from("points,sample_rows,sample_train_ns,all_rows,all_train_ns\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.points,
            r.sample_rows,
            r.sample_train_ns,
            r.all_rows,
            r.all_train_ns.map(|t| t.to_string()).unwrap_or_default()
        )
        .expect("writing to a String");
    }
    out
}

/// Least-squares slope of `ys` against `xs`.
pub fn fitted_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}
