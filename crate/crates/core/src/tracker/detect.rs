//! Candidate scoring with hard thresholding and greedy non-maximum suppression.

use crate::classifier::{decision, LinearModel};
use crate::error::{Error, Result};

use super::stream::Frame;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub candidate: usize,
    pub score: f64,
    pub position: [f64; 2],
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// All survivors of thresholding and suppression, best first.
pub fn suppress(
    model: &LinearModel,
    frame: &Frame,
    threshold: f64,
    suppression_radius: f64,
) -> Result<Vec<Detection>> {
    if frame.candidates.is_empty() {
        return Err(Error::Empty("frame has no candidates"));
    }
    let mut scored = Vec::with_capacity(frame.candidates.len());
    for (i, c) in frame.candidates.iter().enumerate() {
        let score = decision(model, &c.feature)?;
        if score >= threshold {
            scored.push(Detection {
                candidate: i,
                score,
                position: c.position,
            });
        }
    }
    // Stable sort keeps the lower index first among equal scores.
    scored.sort_by(|a, b| b.score.total_cmp(&a.score));

    let mut kept: Vec<Detection> = Vec::new();
    for det in scored {
        if kept
            .iter()
            .all(|k| distance(k.position, det.position) > suppression_radius)
        {
            kept.push(det);
        }
    }
    Ok(kept)
}

pub fn detect(
    model: &LinearModel,
    frame: &Frame,
    threshold: f64,
    suppression_radius: f64,
) -> Result<Option<Detection>> {
    Ok(suppress(model, frame, threshold, suppression_radius)?
        .into_iter()
        .next())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracker::stream::{Candidate, GroundTruth};
    use nalgebra::DVector;

    fn frame(cands: &[([f64; 2], f64)]) -> Frame {
        Frame {
            index: 0,
            candidates: cands
                .iter()
                .map(|&(position, v)| Candidate {
                    position,
                    feature: vec![v, 0.0],
                })
                .collect(),
            truth: GroundTruth {
                candidate: 0,
                position: cands[0].0,
                feature: vec![cands[0].1, 0.0],
            },
            jitter: Vec::new(),
        }
    }

    fn model() -> LinearModel {
        LinearModel {
            w: DVector::from_vec(vec![1.0, 0.0]),
            b: 0.0,
            threshold: 0.0,
        }
    }

    #[test]
    fn everything_below_threshold() {
        let f = frame(&[([0.0, 0.0], 0.1), ([5.0, 0.0], 0.2)]);
        assert_eq!(detect(&model(), &f, 0.5, 1.0).unwrap(), None);
    }

    #[test]
    fn single_survivor() {
        let f = frame(&[([0.0, 0.0], 0.1), ([5.0, 0.0], 0.9)]);
        let det = detect(&model(), &f, 0.5, 1.0).unwrap().unwrap();
        assert_eq!(det.candidate, 1);
        assert_eq!(det.score, 0.9);
    }

    #[test]
    fn greedy_suppression() {
        let radius = 2.0;
        let f = frame(&[
            ([0.0, 0.0], 0.9),
            ([0.1 * radius, 0.0], 1.0),
            ([10.0, 10.0], 0.6),
        ]);
        let kept = suppress(&model(), &f, 0.5, radius).unwrap();
        let ids: Vec<usize> = kept.iter().map(|d| d.candidate).collect();
        assert_eq!(ids, vec![1, 2]);
        assert_eq!(detect(&model(), &f, 0.5, radius).unwrap().unwrap().candidate, 1);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let f = frame(&[([0.0, 0.0], 1.0)]);
        let m = LinearModel::zeros(3);
        assert!(detect(&m, &f, 0.0, 1.0).is_err());
    }

    #[test]
    fn choice_is_invariant_to_positive_feature_scaling() {
        use crate::tracker::stream::{generate_stream, SyntheticStreamConfig};
        let frames = generate_stream(&SyntheticStreamConfig {
            frames: 20,
            seed: 5,
            ..Default::default()
        })
        .unwrap();
        let w: Vec<f64> = frames[0].truth.feature.clone();
        let m = LinearModel {
            w: DVector::from_vec(w),
            b: 0.0,
            threshold: 0.0,
        };
        for f in &frames {
            let base = detect(&m, f, f64::NEG_INFINITY, 1.0).unwrap().unwrap();
            for scale in [1e-3, 0.5, 7.0, 1e4] {
                let mut scaled = f.clone();
                for c in &mut scaled.candidates {
                    c.feature.iter_mut().for_each(|v| *v *= scale);
                }
                let det = detect(&m, &scaled, f64::NEG_INFINITY, 1.0).unwrap().unwrap();
                assert_eq!(det.candidate, base.candidate);
            }
        }
    }
}
