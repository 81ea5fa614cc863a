//! Tracking experiment files: a synthetic stream plus tracker settings.
//!
//! ```json
//! { "stream": { "dim": 128, "frames": 1000, "drift_rate": 0.06, "seed": 1 },
//!   "tracker": { "n": 8, "nu": 1.0, "threshold": 0.0 } }
//! ```
//!
//! Every field is optional. An absent or `null` tracker `threshold` means each
//! model's trained threshold; `radius` defaults to the stream's grid spacing.

use std::path::Path;

use cstk_core::tracker::{ExecutionMode, SyntheticStreamConfig, TrackerConfig, TrainingSource};
use cstk_core::TrainParams;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::formats::read_json;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerSection {
    pub n: usize,
    pub nu: f64,
    pub reg: f64,
    pub iters: usize,
    pub threshold: Option<f64>,
    pub radius: Option<f64>,
    pub match_radius: f64,
    pub em_every: Option<usize>,
    pub em_iterations: usize,
    pub source: String,
    pub concurrent: bool,
    pub sample_seed: u64,
}

impl Default for TrackerSection {
    fn default() -> Self {
        let train = TrainParams::default();
        Self {
            n: 10,
            nu: train.nu,
            reg: train.regularization,
            iters: train.iterations,
            threshold: None,
            radius: None,
            match_radius: 0.0,
            em_every: None,
            em_iterations: 10,
            source: TrainingSource::Hierarchical.name().into(),
            concurrent: false,
            sample_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentFile {
    pub stream: SyntheticStreamConfig,
    pub tracker: TrackerSection,
}

impl ExperimentFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        let file: Self = read_json(path)?;
        file.stream
            .validate()
            .map_err(|e| CliError::usage(format!("{}: stream: {e}", path.display())))?;
        Ok(file)
    }

    pub fn tracker_config(&self) -> CliResult<TrackerConfig> {
        let t = &self.tracker;
        let radius = t.radius.unwrap_or(self.stream.grid_spacing);
        let mut cfg = TrackerConfig::new(t.n, radius);
        cfg.train = TrainParams {
            regularization: t.reg,
            iterations: t.iters,
            nu: t.nu,
            ..TrainParams::default()
        };
        cfg.threshold = t.threshold;
        cfg.match_radius = t.match_radius;
        cfg.em_every = t.em_every;
        cfg.em_iterations = t.em_iterations;
        cfg.source = t.source.parse().map_err(|_| {
            CliError::usage(format!(
                "unknown training source '{}'; valid: {}",
                t.source,
                source_names()
            ))
        })?;
        cfg.mode = if t.concurrent {
            ExecutionMode::Concurrent
        } else {
            ExecutionMode::Sequential
        };
        cfg.sample_seed = t.sample_seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn source_names() -> String {
    TrainingSource::ALL.map(|s| s.name()).join(", ")
}
