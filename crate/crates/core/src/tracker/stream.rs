//! Seeded synthetic candidate streams.
//!
//! The target's appearance is `offset·u + z_t`, where `u` is the normalized
//! all-ones vector and `z_t` a Gaussian random walk renormalized to its
//! initial length after every step, so old appearance decorrelates instead of
//! persisting as a growing component. Distractors mix the
//! target's appearance with a fresh random appearance. Candidates sit on a
//! grid around the target, whose center follows a constant-velocity path
//! with random velocity kicks.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticStreamConfig {
    pub dim: usize,
    pub frames: usize,
    /// Expected norm of the per-frame appearance step.
    pub drift_rate: f64,
    /// Expected norm of the per-observation feature noise.
    pub noise_scale: f64,
    pub distractor_count: usize,
    /// Weight of the target's appearance inside each distractor, in `[0, 1)`.
    pub distractor_similarity: f64,
    /// Shared positive appearance component of every candidate.
    pub feature_offset: f64,
    pub grid_spacing: f64,
    pub initial_position: [f64; 2],
    pub initial_velocity: [f64; 2],
    /// Standard deviation of the per-frame velocity kick, per axis.
    pub motion_noise: f64,
    /// Perturbed copies of the target feature attached to each frame.
    pub jitter_copies: usize,
    pub jitter_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticStreamConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            frames: 400,
            drift_rate: 0.05,
            noise_scale: 0.1,
            distractor_count: 8,
            distractor_similarity: 0.5,
            feature_offset: 1.0,
            grid_spacing: 4.0,
            initial_position: [0.0, 0.0],
            initial_velocity: [1.0, 0.5],
            motion_noise: 0.05,
            jitter_copies: 0,
            jitter_scale: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticStreamConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.dim == 0 {
            return bad("dim must be ≥ 1".into());
        }
        if self.frames == 0 {
            return bad("frames must be ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.distractor_similarity) {
            return bad(format!(
                "distractor_similarity must lie in [0, 1), got {}",
                self.distractor_similarity
            ));
        }
        for (name, v) in [
            ("drift_rate", self.drift_rate),
            ("noise_scale", self.noise_scale),
            ("feature_offset", self.feature_offset),
            ("motion_noise", self.motion_noise),
            ("jitter_scale", self.jitter_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and ≥ 0, got {v}"));
            }
        }
        if !(self.grid_spacing.is_finite() && self.grid_spacing > 0.0) {
            return bad(format!("grid_spacing must be > 0, got {}", self.grid_spacing));
        }
        if self
            .initial_position
            .iter()
            .chain(&self.initial_velocity)
            .any(|v| !v.is_finite())
        {
            return bad("initial position and velocity must be finite".into());
        }
        if self.distractor_count > 10_000 {
            return bad("distractor_count is limited to 10000".into());
        }
        Ok(())
    }

    /// Half-width, in grid cells, of the window distractors are placed in.
    fn grid_radius(&self) -> i64 {
        let mut r = 1i64;
        while ((2 * r + 1) * (2 * r + 1) - 1) < self.distractor_count as i64 {
            r += 1;
        }
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub position: [f64; 2],
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Index of the target among the frame's candidates.
    pub candidate: usize,
    pub position: [f64; 2],
    /// Noise-free appearance.
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub index: usize,
    pub candidates: Vec<Candidate>,
    pub truth: GroundTruth,
    /// Perturbed copies of the target's observed feature.
    pub jitter: Vec<Vec<f64>>,
}

impl Frame {
    pub fn dim(&self) -> usize {
        self.truth.feature.len()
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    let s = scale / (dim as f64).sqrt();
    (0..dim).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn generate_stream(config: &SyntheticStreamConfig) -> Result<Vec<Frame>> {
    config.validate()?;
    let d = config.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let base = config.feature_offset / (d as f64).sqrt();
    let s = config.distractor_similarity;
    let radius = config.grid_radius();
    let side = (2 * radius + 1) as usize;
    let center_cell = side * side / 2;

    let mut walk = gaussian(&mut rng, d, 1.0);
    let walk_norm = walk.iter().map(|z| z * z).sum::<f64>().sqrt();
    let mut position = config.initial_position;
    let mut velocity = config.initial_velocity;
    let mut frames = Vec::with_capacity(config.frames);

    for t in 0..config.frames {
        let appearance: Vec<f64> = walk.iter().map(|z| base + z).collect();
        let observe = |rng: &mut ChaCha8Rng, clean: &[f64]| -> Vec<f64> {
            gaussian(rng, d, config.noise_scale)
                .into_iter()
                .zip(clean)
                .map(|(e, v)| v + e)
                .collect()
        };

        let target_feature = observe(&mut rng, &appearance);
        let jitter = (0..config.jitter_copies)
            .map(|_| {
                gaussian(&mut rng, d, config.jitter_scale)
                    .into_iter()
                    .zip(&target_feature)
                    .map(|(e, v)| v + e)
                    .collect()
            })
            .collect();

        let cells: Vec<usize> = index::sample(&mut rng, side * side - 1, config.distractor_count)
            .into_iter()
            .map(|c| if c >= center_cell { c + 1 } else { c })
            .collect();
        let mut candidates = Vec::with_capacity(config.distractor_count + 1);
        for cell in cells {
            let dx = (cell % side) as i64 - radius;
            let dy = (cell / side) as i64 - radius;
            let other = gaussian(&mut rng, d, 1.0);
            let clean: Vec<f64> = appearance
                .iter()
                .zip(&other)
                .map(|(a, r)| s * a + (1.0 - s) * (base + r))
                .collect();
            candidates.push(Candidate {
                position: [
                    position[0] + dx as f64 * config.grid_spacing,
                    position[1] + dy as f64 * config.grid_spacing,
                ],
                feature: observe(&mut rng, &clean),
            });
        }
        let slot = rng.random_range(0..=candidates.len());
        candidates.insert(
            slot,
            Candidate {
                position,
                feature: target_feature,
            },
        );

        frames.push(Frame {
            index: t,
            candidates,
            truth: GroundTruth {
                candidate: slot,
                position,
                feature: appearance,
            },
            jitter,
        });

        if config.drift_rate > 0.0 {
            for z in walk.iter_mut() {
                *z += config.drift_rate / (d as f64).sqrt() * rng.sample::<f64, _>(StandardNormal);
            }
            let norm = walk.iter().map(|z| z * z).sum::<f64>().sqrt();
            if norm > 0.0 {
                walk.iter_mut().for_each(|z| *z *= walk_norm / norm);
            }
        }
        for a in 0..2 {
            position[a] += velocity[a];
            velocity[a] += config.motion_noise * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(frames)
}
