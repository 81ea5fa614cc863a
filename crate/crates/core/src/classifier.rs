//! Linear appearance models trained by full-batch subgradient descent.
//!
//! The one-class model separates the training rows from the origin:
//!
//! ```text
//! J(w, ρ) = λ/2·‖w‖² + 1/(ν·m)·Σ max(0, ρ − w·xᵢ) − ρ
//! ```
//!
//! `ρ` is minimized exactly for each `w` (it is the `⌈ν·m⌉`-th smallest
//! score), which leaves a convex function of `w` alone. The binary model is
//! the usual regularized hinge loss with an unregularized bias.
//!
//! Steps follow `η_t = s·η₀ / t`; a step that would raise the objective is
//! rejected and halves `s`, so the recorded objective never increases.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::lowrank::DataBlock;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub w: DVector<f64>,
    pub b: f64,
    /// Decision cutoff: a candidate is accepted when `decision ≥ threshold`.
    pub threshold: f64,
}

impl LinearModel {
    pub fn zeros(dim: usize) -> Self {
        Self {
            w: DVector::zeros(dim),
            b: 0.0,
            threshold: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainParams {
    /// λ in the objective.
    pub regularization: f64,
    pub iterations: usize,
    /// η₀; `None` uses `1/λ`.
    pub initial_step: Option<f64>,
    /// One-class outlier fraction ν ∈ (0, 1].
    pub nu: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            regularization: 1e-2,
            iterations: 100,
            initial_step: None,
            nu: 0.1,
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.regularization > 0.0 && self.regularization.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "regularization must be > 0, got {}",
                self.regularization
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidParameter("iterations must be ≥ 1".into()));
        }
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "nu must lie in (0, 1], got {}",
                self.nu
            )));
        }
        if let Some(step) = self.initial_step {
            if !(step > 0.0 && step.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "initial step must be > 0, got {step}"
                )));
            }
        }
        Ok(())
    }

    fn eta0(&self) -> f64 {
        self.initial_step.unwrap_or(1.0 / self.regularization)
    }
}

/// Model plus the objective after every iteration.
#[derive(Debug, Clone)]
pub struct TrainTrace {
    pub model: LinearModel,
    pub initial_objective: f64,
    pub objectives: Vec<f64>,
}

/// `w·x + b`.
pub fn decision(model: &LinearModel, x: &[f64]) -> Result<f64> {
    if x.len() != model.w.len() {
        return Err(Error::DimensionMismatch {
            expected: model.w.len(),
            found: x.len(),
        });
    }
    Ok(model.w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + model.b)
}

fn scores(rows: &DataBlock, w: &DVector<f64>) -> DVector<f64> {
    rows.matrix() * w
}

/// Optimal offset for fixed scores: the `⌈ν·m⌉`-th smallest score.
fn optimal_rho(scores: &DVector<f64>, nu: f64) -> f64 {
    let m = scores.len();
    let rank = ((nu * m as f64).ceil() as usize).clamp(1, m);
    let mut buf: Vec<f64> = scores.iter().copied().collect();
    let (_, kth, _) = buf.select_nth_unstable_by(rank - 1, |a, b| a.total_cmp(b));
    *kth
}

/// One-class objective of `model`, with `ρ` profiled out.
pub fn one_class_objective(model: &LinearModel, rows: &DataBlock, params: &TrainParams) -> Result<f64> {
    check_dim(rows, model.dim())?;
    Ok(one_class_eval(rows, &model.w, params).0)
}

/// A subgradient of the profiled one-class objective at `w`.
pub fn one_class_subgradient(
    w: &DVector<f64>,
    rows: &DataBlock,
    params: &TrainParams,
) -> Result<DVector<f64>> {
    check_dim(rows, w.len())?;
    Ok(one_class_eval(rows, w, params).1)
}

fn one_class_eval(rows: &DataBlock, w: &DVector<f64>, params: &TrainParams) -> (f64, DVector<f64>, f64) {
    let s = scores(rows, w);
    let rho = optimal_rho(&s, params.nu);
    let budget = params.nu * rows.rows() as f64;
    let scale = 1.0 / budget;
    let mut hinge = 0.0;
    let mut below = 0usize;
    let mut tied = 0usize;
    // Per-row gradient weights, applied with one dense product so the cost
    // of an evaluation does not depend on how many rows are active.
    let mut weights = DVector::zeros(s.len());
    for (i, &si) in s.iter().enumerate() {
        if si < rho {
            hinge += rho - si;
            below += 1;
            weights[i] = -scale;
        } else if si == rho {
            tied += 1;
        }
    }
    // Rows scoring exactly ρ share the remaining ν·m − below units of weight;
    // away from ties this is the gradient of the profiled objective.
    let remaining = (budget - below as f64).max(0.0);
    if tied > 0 && remaining > 0.0 {
        let share = -scale * remaining / tied as f64;
        for (wi, &si) in weights.iter_mut().zip(s.iter()) {
            if si == rho {
                *wi = share;
            }
        }
    }
    let mut grad = w * params.regularization;
    grad.gemv_tr(1.0, rows.matrix(), &weights, 1.0);
    let objective = 0.5 * params.regularization * w.norm_squared() + scale * hinge - rho;
    (objective, grad, rho)
}

fn check_dim(rows: &DataBlock, dim: usize) -> Result<()> {
    if rows.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: rows.dim(),
        });
    }
    Ok(())
}

/// Trains an origin-separating one-class model. The returned threshold is
/// the optimal `ρ`, so roughly a `1 − ν` fraction of rows score at or above it.
pub fn train_one_class(rows: &DataBlock, params: &TrainParams) -> Result<LinearModel> {
    Ok(train_one_class_traced(rows, params)?.model)
}

pub fn train_one_class_traced(rows: &DataBlock, params: &TrainParams) -> Result<TrainTrace> {
    params.validate()?;
    let dim = rows.dim();
    let mut w = DVector::zeros(dim);
    let (mut objective, mut grad, mut rho) = one_class_eval(rows, &w, params);
    let initial_objective = objective;
    let eta0 = params.eta0();
    let mut scale = 1.0;
    let mut objectives = Vec::with_capacity(params.iterations);

    for t in 1..=params.iterations {
        let eta = scale * eta0 / t as f64;
        let candidate = &w - &grad * eta;
        let (c_obj, c_grad, c_rho) = one_class_eval(rows, &candidate, params);
        if c_obj <= objective {
            w = candidate;
            objective = c_obj;
            grad = c_grad;
            rho = c_rho;
        } else {
            scale *= 0.5;
        }
        objectives.push(objective);
    }

    Ok(TrainTrace {
        model: LinearModel {
            w,
            b: 0.0,
            threshold: rho,
        },
        initial_objective,
        objectives,
    })
}

fn binary_eval(
    pos: &DataBlock,
    neg: &DataBlock,
    w: &DVector<f64>,
    b: f64,
    params: &TrainParams,
) -> (f64, DVector<f64>, f64) {
    let m = (pos.rows() + neg.rows()) as f64;
    let mut grad_w = w * params.regularization;
    let mut grad_b = 0.0;
    let mut hinge = 0.0;
    for (rows, label) in [(pos, 1.0), (neg, -1.0)] {
        let s = scores(rows, w);
        let mut weights = DVector::zeros(s.len());
        for (i, &si) in s.iter().enumerate() {
            let margin = 1.0 - label * (si + b);
            if margin > 0.0 {
                hinge += margin;
                weights[i] = -label / m;
                grad_b -= label / m;
            }
        }
        grad_w.gemv_tr(1.0, rows.matrix(), &weights, 1.0);
    }
    let objective = 0.5 * params.regularization * w.norm_squared() + hinge / m;
    (objective, grad_w, grad_b)
}

/// Regularized binary hinge objective of `model`.
pub fn binary_objective(
    model: &LinearModel,
    pos: &DataBlock,
    neg: &DataBlock,
    params: &TrainParams,
) -> Result<f64> {
    check_dim(pos, model.dim())?;
    check_dim(neg, model.dim())?;
    Ok(binary_eval(pos, neg, &model.w, model.b, params).0)
}

pub fn train_binary(pos: &DataBlock, neg: &DataBlock, params: &TrainParams) -> Result<LinearModel> {
    Ok(train_binary_traced(pos, neg, params)?.model)
}

pub fn train_binary_traced(
    pos: &DataBlock,
    neg: &DataBlock,
    params: &TrainParams,
) -> Result<TrainTrace> {
    params.validate()?;
    check_dim(neg, pos.dim())?;
    let mut w = DVector::zeros(pos.dim());
    let mut b = 0.0;
    let (mut objective, mut grad_w, mut grad_b) = binary_eval(pos, neg, &w, b, params);
    let initial_objective = objective;
    let eta0 = params.eta0();
    let mut scale = 1.0;
    let mut objectives = Vec::with_capacity(params.iterations);

    for t in 1..=params.iterations {
        let eta = scale * eta0 / t as f64;
        let cand_w = &w - &grad_w * eta;
        let cand_b = b - grad_b * eta;
        let (c_obj, c_gw, c_gb) = binary_eval(pos, neg, &cand_w, cand_b, params);
        if c_obj <= objective {
            w = cand_w;
            b = cand_b;
            objective = c_obj;
            grad_w = c_gw;
            grad_b = c_gb;
        } else {
            scale *= 0.5;
        }
        objectives.push(objective);
    }

    Ok(TrainTrace {
        model: LinearModel {
            w,
            b,
            threshold: 0.0,
        },
        initial_objective,
        objectives,
    })
}
