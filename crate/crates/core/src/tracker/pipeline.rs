//! The classify → compress → train loop.
//!
//! Classification detects the target with the latest published model and
//! smooths its center; compression owns the coreset tree and emits a training
//! job whenever a leaf forms; training fits a one-class model per job and
//! publishes it. In concurrent mode the three stages run on their own threads
//! joined by bounded channels. Classification of a frame waits for the model
//! covering every leaf completed by earlier frames, which makes the
//! concurrent schedule produce exactly the sequential result.

use std::sync::mpsc::{self, Receiver, SyncSender};
use std::thread;

use crate::classifier::{train_one_class, LinearModel, TrainParams};
use crate::error::{Error, Result};
use crate::lowrank::DataBlock;
use crate::sampling::{hierarchical_sample, random_sample, root_sample, subsample, SampleSet};
use crate::tree::{CoresetTree, TreeView};

use super::detect::{detect, Detection};
use super::kalman::{
    em_fit, kalman_predict, kalman_update, min_covariance_eigenvalue, KalmanState, NoiseParams,
};
use super::stream::Frame;

/// Where each model's training rows come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrainingSource {
    /// Recency-weighted sample of the coreset tree.
    Hierarchical,
    /// The collapsed root of the tree.
    Root,
    /// `n` rows drawn uniformly from the full pushed history.
    Random,
    /// `n` uniformly spaced rows of the full pushed history.
    Subsample,
}

impl TrainingSource {
    pub const ALL: [TrainingSource; 4] = [
        TrainingSource::Hierarchical,
        TrainingSource::Root,
        TrainingSource::Random,
        TrainingSource::Subsample,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainingSource::Hierarchical => "hierarchical",
            TrainingSource::Root => "root",
            TrainingSource::Random => "random",
            TrainingSource::Subsample => "subsample",
        }
    }

    fn uses_history(self) -> bool {
        matches!(self, TrainingSource::Random | TrainingSource::Subsample)
    }
}

impl std::str::FromStr for TrainingSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainingSource::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown training source '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecutionMode {
    Sequential,
    Concurrent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    /// Leaf size of the coreset tree; also the bootstrap length.
    pub n: usize,
    pub train: TrainParams,
    /// Fixed detection threshold; `None` uses each model's trained threshold.
    pub threshold: Option<f64>,
    pub suppression_radius: f64,
    /// A detection also counts as correct within this distance of the truth.
    pub match_radius: f64,
    /// Frames between EM refits; `None` refits once per `n` frames.
    pub em_every: Option<usize>,
    pub em_iterations: usize,
    pub initial_noise: NoiseParams,
    pub source: TrainingSource,
    pub mode: ExecutionMode,
    /// Seeds the random-sampling baseline.
    pub sample_seed: u64,
}

impl TrackerConfig {
    pub fn new(n: usize, suppression_radius: f64) -> Self {
        Self {
            n,
            train: TrainParams::default(),
            threshold: None,
            suppression_radius,
            match_radius: 0.0,
            em_every: None,
            em_iterations: 10,
            initial_noise: NoiseParams::isotropic(0.01, 0.1, 1.0),
            source: TrainingSource::Hierarchical,
            mode: ExecutionMode::Sequential,
            sample_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidParameter("leaf size n must be ≥ 1".into()));
        }
        self.train.validate()?;
        if !(self.suppression_radius.is_finite() && self.suppression_radius >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "suppression radius must be ≥ 0, got {}",
                self.suppression_radius
            )));
        }
        if !(self.match_radius.is_finite() && self.match_radius >= 0.0) {
            return Err(Error::InvalidParameter("match radius must be ≥ 0".into()));
        }
        if let Some(t) = self.threshold {
            if !t.is_finite() {
                return Err(Error::InvalidParameter("threshold must be finite".into()));
            }
        }
        if self.em_every == Some(0) {
            return Err(Error::InvalidParameter("em_every must be ≥ 1".into()));
        }
        NoiseParams::new(self.initial_noise.q, self.initial_noise.r)?;
        Ok(())
    }

    fn em_period(&self) -> usize {
        self.em_every.unwrap_or(self.n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame: usize,
    pub bootstrap: bool,
    pub chosen: Option<usize>,
    pub confidence: Option<f64>,
    /// Kalman position estimate after this frame.
    pub estimate: [f64; 2],
    pub correct: bool,
    /// Number of leaves behind the model used; `None` during bootstrap.
    pub model_version: Option<usize>,
    /// Last frame that contributed training rows to that model.
    pub model_data_through: Option<usize>,
    /// Smallest eigenvalue of the Kalman covariance after this frame.
    pub covariance_min_eig: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackRun {
    pub records: Vec<FrameRecord>,
    pub success_rate: f64,
    pub models_trained: usize,
}

/// Fraction of post-bootstrap frames whose detection was correct.
pub fn evaluate(records: &[FrameRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("run has no frames"));
    }
    let scored: Vec<&FrameRecord> = records.iter().filter(|r| !r.bootstrap).collect();
    if scored.is_empty() {
        return Ok(0.0);
    }
    let hits = scored.iter().filter(|r| r.correct).count();
    Ok(hits as f64 / scored.len() as f64)
}

/// Rows pushed for one frame.
struct PushBatch {
    frame: usize,
    rows: Vec<Vec<f64>>,
}

/// Training input captured the moment a leaf forms.
enum JobInput {
    Tree(TreeView),
    Rows(SampleSet),
}

struct TrainJob {
    version: usize,
    data_through: usize,
    input: JobInput,
}

#[derive(Clone)]
struct Published {
    version: usize,
    data_through: usize,
    model: LinearModel,
}

/// Single writer of the tree (and the raw history the baselines draw from).
struct Compressor {
    tree: CoresetTree,
    source: TrainingSource,
    sample_seed: u64,
    history: Vec<f64>,
    history_rows: usize,
    leaves: usize,
}

impl Compressor {
    fn new(n: usize, dim: usize, source: TrainingSource, sample_seed: u64) -> Result<Self> {
        Ok(Self {
            tree: CoresetTree::new(n, dim)?.without_series(),
            source,
            sample_seed,
            history: Vec::new(),
            history_rows: 0,
            leaves: 0,
        })
    }

    fn push(&mut self, batch: PushBatch) -> Result<Vec<TrainJob>> {
        let mut jobs = Vec::new();
        for row in &batch.rows {
            let report = self.tree.push_point(row)?;
            if self.source.uses_history() {
                self.history.extend_from_slice(row);
                self.history_rows += 1;
            }
            if report.leaf_formed {
                self.leaves += 1;
                let input = match self.source {
                    TrainingSource::Hierarchical | TrainingSource::Root => {
                        JobInput::Tree(self.tree.snapshot())
                    }
                    TrainingSource::Random | TrainingSource::Subsample => {
                        let history = DataBlock::from_row_slice(
                            self.history_rows,
                            self.tree.dim(),
                            &self.history,
                        )?;
                        let n = self.tree.n();
                        JobInput::Rows(if self.source == TrainingSource::Random {
                            random_sample(&history, n, job_seed(self.sample_seed, self.leaves))?
                        } else {
                            subsample(&history, n)?
                        })
                    }
                };
                jobs.push(TrainJob {
                    version: self.leaves,
                    data_through: batch.frame,
                    input,
                });
            }
        }
        Ok(jobs)
    }
}

fn job_seed(seed: u64, version: usize) -> u64 {
    seed ^ (version as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn train_job(job: TrainJob, source: TrainingSource, params: &TrainParams) -> Result<Published> {
    let sample = match job.input {
        JobInput::Tree(view) => match source {
            TrainingSource::Root => root_sample(&view)?,
            _ => hierarchical_sample(&view)?,
        },
        JobInput::Rows(sample) => sample,
    };
    Ok(Published {
        version: job.version,
        data_through: job.data_through,
        model: train_one_class(sample.rows(), params)?,
    })
}

/// Detection, smoothing and bookkeeping for the classification stage.
struct Classifier<'a> {
    config: &'a TrackerConfig,
    kalman: Option<KalmanState>,
    noise: NoiseParams,
    centers: Vec<[f64; 2]>,
    rows_sent: usize,
}

impl<'a> Classifier<'a> {
    fn new(config: &'a TrackerConfig) -> Self {
        Self {
            config,
            kalman: None,
            noise: config.initial_noise,
            centers: Vec::new(),
            rows_sent: 0,
        }
    }

    /// Leaves completed by the rows already sent to compression.
    fn required_version(&self) -> usize {
        self.rows_sent / self.config.n
    }

    fn process(
        &mut self,
        frame: &Frame,
        model: Option<&Published>,
    ) -> Result<(FrameRecord, PushBatch)> {
        let bootstrap = frame.index < self.config.n;
        let (choice, rows): (Option<Detection>, Vec<Vec<f64>>) = if bootstrap {
            let truth = frame.truth.candidate;
            let cand = &frame.candidates[truth];
            let mut rows = vec![cand.feature.clone()];
            rows.extend(frame.jitter.iter().cloned());
            (
                Some(Detection {
                    candidate: truth,
                    score: f64::NAN,
                    position: cand.position,
                }),
                rows,
            )
        } else {
            let published = model.ok_or(Error::Empty("no model published after bootstrap"))?;
            let threshold = self.config.threshold.unwrap_or(published.model.threshold);
            let det = detect(
                &published.model,
                frame,
                threshold,
                self.config.suppression_radius,
            )?;
            let rows = det
                .map(|d| vec![frame.candidates[d.candidate].feature.clone()])
                .unwrap_or_default();
            (det, rows)
        };

        let predicted = match &self.kalman {
            None => None,
            Some(state) => Some(kalman_predict(state, &self.noise, 1.0)?),
        };
        let state = match (predicted, choice) {
            (None, Some(det)) => {
                KalmanState::at_rest(det.position, self.config.suppression_radius.max(1.0))
            }
            (None, None) => KalmanState::at_rest(frame.truth.position, 1.0),
            (Some(pred), Some(det)) => kalman_update(&pred, det.position, &self.noise)?,
            (Some(pred), None) => pred,
        };
        self.kalman = Some(state);
        if let Some(det) = choice {
            self.centers.push(det.position);
        }
        let period = self.config.em_period();
        if !bootstrap && (frame.index + 1) % period == 0 {
            let start = self.centers.len().saturating_sub(self.config.n);
            if let Ok(noise) = em_fit(&self.centers[start..], self.config.em_iterations) {
                self.noise = noise;
            }
        }

        let correct = choice.is_some_and(|d| {
            d.candidate == frame.truth.candidate
                || ((d.position[0] - frame.truth.position[0]).powi(2)
                    + (d.position[1] - frame.truth.position[1]).powi(2))
                .sqrt()
                    <= self.config.match_radius
        });
        self.rows_sent += rows.len();
        let record = FrameRecord {
            frame: frame.index,
            bootstrap,
            chosen: choice.map(|d| d.candidate),
            confidence: if bootstrap {
                None
            } else {
                choice.map(|d| d.score)
            },
            estimate: state.position(),
            correct,
            model_version: if bootstrap {
                None
            } else {
                model.map(|m| m.version)
            },
            model_data_through: if bootstrap {
                None
            } else {
                model.map(|m| m.data_through)
            },
            covariance_min_eig: min_covariance_eigenvalue(&state),
        };
        Ok((
            record,
            PushBatch {
                frame: frame.index,
                rows,
            },
        ))
    }
}

fn check_frames(frames: &[Frame]) -> Result<usize> {
    let first = frames.first().ok_or(Error::Empty("stream has no frames"))?;
    let dim = first.dim();
    for (t, f) in frames.iter().enumerate() {
        if f.index != t {
            return Err(Error::InvalidParameter(format!(
                "frame {t} carries index {}",
                f.index
            )));
        }
        if f.candidates.is_empty() || f.truth.candidate >= f.candidates.len() {
            return Err(Error::InvalidParameter(format!("frame {t} has no valid target")));
        }
        for c in &f.candidates {
            if c.feature.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: c.feature.len(),
                });
            }
            if c.position.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "frame {t} has a non-finite candidate position"
                )));
            }
        }
        if f.jitter.iter().any(|j| j.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: f.jitter.iter().map(Vec::len).find(|&l| l != dim).unwrap_or(0),
            });
        }
    }
    Ok(dim)
}

/// Runs the tracking loop over a whole stream.
pub fn run_cat(frames: &[Frame], config: &TrackerConfig) -> Result<TrackRun> {
    config.validate()?;
    let dim = check_frames(frames)?;
    let (records, models_trained) = match config.mode {
        ExecutionMode::Sequential => run_sequential(frames, config, dim)?,
        ExecutionMode::Concurrent => run_concurrent(frames, config, dim)?,
    };
    let success_rate = evaluate(&records)?;
    Ok(TrackRun {
        records,
        success_rate,
        models_trained,
    })
}

fn run_sequential(
    frames: &[Frame],
    config: &TrackerConfig,
    dim: usize,
) -> Result<(Vec<FrameRecord>, usize)> {
    let mut classifier = Classifier::new(config);
    let mut compressor = Compressor::new(config.n, dim, config.source, config.sample_seed)?;
    let mut latest: Option<Published> = None;
    let mut trained = 0;
    let mut records = Vec::with_capacity(frames.len());
    for frame in frames {
        let (record, batch) = classifier.process(frame, latest.as_ref())?;
        records.push(record);
        for job in compressor.push(batch)? {
            latest = Some(train_job(job, config.source, &config.train)?);
            trained += 1;
        }
    }
    Ok((records, trained))
}

const QUEUE_DEPTH: usize = 4;

fn run_concurrent(
    frames: &[Frame],
    config: &TrackerConfig,
    dim: usize,
) -> Result<(Vec<FrameRecord>, usize)> {
    let (batch_tx, batch_rx) = mpsc::sync_channel::<PushBatch>(QUEUE_DEPTH);
    let (job_tx, job_rx) = mpsc::sync_channel::<TrainJob>(QUEUE_DEPTH);
    let (model_tx, model_rx) = mpsc::channel::<Result<Published>>();
    let compressor = Compressor::new(config.n, dim, config.source, config.sample_seed)?;
    let source = config.source;
    let params = config.train;

    thread::scope(|scope| {
        let compress = scope.spawn(move || compress_stage(compressor, batch_rx, job_tx));
        let train = scope.spawn(move || train_stage(job_rx, model_tx, source, params));

        let outcome = classify_stage(frames, config, batch_tx, model_rx);

        let compressed = compress.join().map_err(|_| Error::Pipeline("compression stage panicked".into()))?;
        let trained = train.join().map_err(|_| Error::Pipeline("training stage panicked".into()))?;
        compressed?;
        Ok((outcome?, trained))
    })
}

fn compress_stage(
    mut compressor: Compressor,
    batches: Receiver<PushBatch>,
    jobs: SyncSender<TrainJob>,
) -> Result<()> {
    for batch in batches {
        for job in compressor.push(batch)? {
            if jobs.send(job).is_err() {
                return Ok(());
            }
        }
    }
    Ok(())
}

fn train_stage(
    jobs: Receiver<TrainJob>,
    models: mpsc::Sender<Result<Published>>,
    source: TrainingSource,
    params: TrainParams,
) -> usize {
    let mut trained = 0;
    for job in jobs {
        let result = train_job(job, source, &params);
        let failed = result.is_err();
        trained += usize::from(!failed);
        if models.send(result).is_err() || failed {
            break;
        }
    }
    trained
}

fn classify_stage(
    frames: &[Frame],
    config: &TrackerConfig,
    batches: SyncSender<PushBatch>,
    models: Receiver<Result<Published>>,
) -> Result<Vec<FrameRecord>> {
    let mut classifier = Classifier::new(config);
    let mut latest: Option<Published> = None;
    let mut records = Vec::with_capacity(frames.len());
    for frame in frames {
        let required = classifier.required_version();
        while latest.as_ref().map_or(0, |m| m.version) < required {
            match models.recv() {
                Ok(result) => latest = Some(result?),
                Err(_) => {
                    return Err(Error::Pipeline(
                        "training stage stopped before publishing a required model".into(),
                    ))
                }
            }
        }
        let (record, batch) = classifier.process(frame, latest.as_ref())?;
        records.push(record);
        if batches.send(batch).is_err() {
            return Err(Error::Pipeline("compression stage stopped early".into()));
        }
    }
    Ok(records)
}
