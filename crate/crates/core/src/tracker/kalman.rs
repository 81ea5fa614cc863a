//! Constant-velocity Kalman filter over 2-D centers and EM estimation of its
//! process and measurement noise.
//!
//! State is `[x, y, vx, vy]`; only the position is observed. EM alternates a
//! Rauch–Tung–Striebel smoothing pass with closed-form updates of `Q` and `R`
//! (initial state, transition and observation matrices stay fixed), so each
//! iteration cannot lower the marginal likelihood.

use nalgebra::{Matrix2, Matrix2x4, Matrix4, Matrix4x2, SymmetricEigen, Vector2, Vector4};

use crate::error::{Error, Result};

/// Diagonal floor applied to EM covariance estimates.
pub const COVARIANCE_FLOOR: f64 = 1e-9;

const PSD_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanState {
    pub x: Vector4<f64>,
    pub p: Matrix4<f64>,
}

impl KalmanState {
    pub fn new(x: Vector4<f64>, p: Matrix4<f64>) -> Result<Self> {
        check_psd4(&p, "state covariance")?;
        Ok(Self { x, p })
    }

    /// Stationary state at `position` with isotropic uncertainty.
    pub fn at_rest(position: [f64; 2], variance: f64) -> Self {
        Self {
            x: Vector4::new(position[0], position[1], 0.0, 0.0),
            p: Matrix4::identity() * variance,
        }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x[0], self.x[1]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams {
    /// Process noise, per unit time step.
    pub q: Matrix4<f64>,
    /// Measurement noise.
    pub r: Matrix2<f64>,
}

impl NoiseParams {
    pub fn new(q: Matrix4<f64>, r: Matrix2<f64>) -> Result<Self> {
        check_psd4(&q, "process noise")?;
        check_psd2(&r, "measurement noise")?;
        Ok(Self { q, r })
    }

    /// Independent position/velocity process noise and isotropic measurement noise.
    pub fn isotropic(position_var: f64, velocity_var: f64, measurement_var: f64) -> Self {
        Self {
            q: Matrix4::from_diagonal(&Vector4::new(
                position_var,
                position_var,
                velocity_var,
                velocity_var,
            )),
            r: Matrix2::identity() * measurement_var,
        }
    }
}

fn transition(dt: f64) -> Matrix4<f64> {
    let mut f = Matrix4::identity();
    f[(0, 2)] = dt;
    f[(1, 3)] = dt;
    f
}

fn observation() -> Matrix2x4<f64> {
    let mut h = Matrix2x4::zeros();
    h[(0, 0)] = 1.0;
    h[(1, 1)] = 1.0;
    h
}

fn symmetrize4(p: &Matrix4<f64>) -> Matrix4<f64> {
    (p + p.transpose()) * 0.5
}

fn symmetrize2(p: &Matrix2<f64>) -> Matrix2<f64> {
    (p + p.transpose()) * 0.5
}

fn check_psd4(m: &Matrix4<f64>, what: &str) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPsd(format!("{what} has non-finite entries")));
    }
    let asym = (m - m.transpose()).abs().max();
    if asym > PSD_TOL * (1.0 + m.abs().max()) {
        return Err(Error::NotPsd(format!("{what} is not symmetric ({asym:e})")));
    }
    let min_eig = SymmetricEigen::new(symmetrize4(m)).eigenvalues.min();
    if min_eig < -PSD_TOL * (1.0 + m.abs().max()) {
        return Err(Error::NotPsd(format!("{what} has eigenvalue {min_eig:e}")));
    }
    Ok(())
}

fn check_psd2(m: &Matrix2<f64>, what: &str) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPsd(format!("{what} has non-finite entries")));
    }
    let asym = (m - m.transpose()).abs().max();
    if asym > PSD_TOL * (1.0 + m.abs().max()) {
        return Err(Error::NotPsd(format!("{what} is not symmetric ({asym:e})")));
    }
    let min_eig = SymmetricEigen::new(symmetrize2(m)).eigenvalues.min();
    if min_eig < -PSD_TOL * (1.0 + m.abs().max()) {
        return Err(Error::NotPsd(format!("{what} has eigenvalue {min_eig:e}")));
    }
    Ok(())
}

/// Smallest eigenvalue of the (symmetrized) state covariance.
pub fn min_covariance_eigenvalue(state: &KalmanState) -> f64 {
    SymmetricEigen::new(symmetrize4(&state.p)).eigenvalues.min()
}

pub fn kalman_predict(state: &KalmanState, noise: &NoiseParams, dt: f64) -> Result<KalmanState> {
    check_psd4(&state.p, "state covariance")?;
    check_psd4(&noise.q, "process noise")?;
    Ok(predict_unchecked(state, &noise.q, dt))
}

fn predict_unchecked(state: &KalmanState, q: &Matrix4<f64>, dt: f64) -> KalmanState {
    let f = transition(dt);
    KalmanState {
        x: f * state.x,
        p: symmetrize4(&(f * state.p * f.transpose() + q)),
    }
}

pub fn kalman_update(
    state: &KalmanState,
    measurement: [f64; 2],
    noise: &NoiseParams,
) -> Result<KalmanState> {
    check_psd4(&state.p, "state covariance")?;
    check_psd2(&noise.r, "measurement noise")?;
    update_unchecked(state, Vector2::new(measurement[0], measurement[1]), &noise.r)
        .map(|(s, _)| s)
        .ok_or_else(|| Error::NotPsd("innovation covariance is singular".into()))
}

/// Joseph-form update; also returns the innovation log-density.
fn update_unchecked(
    state: &KalmanState,
    z: Vector2<f64>,
    r: &Matrix2<f64>,
) -> Option<(KalmanState, f64)> {
    let h = observation();
    let innovation = z - h * state.x;
    let s = symmetrize2(&(h * state.p * h.transpose() + r));
    let s_inv = s.try_inverse()?;
    let gain: Matrix4x2<f64> = state.p * h.transpose() * s_inv;
    let x = state.x + gain * innovation;
    let i_kh = Matrix4::identity() - gain * h;
    let p = symmetrize4(&(i_kh * state.p * i_kh.transpose() + gain * r * gain.transpose()));
    let det = s.determinant();
    if !(det > 0.0) {
        return None;
    }
    let quad = (innovation.transpose() * s_inv * innovation)[(0, 0)];
    let log_density = -0.5 * (2.0 * (2.0 * std::f64::consts::PI).ln() + det.ln() + quad);
    Some((KalmanState { x, p }, log_density))
}

struct FilterPass {
    predicted: Vec<KalmanState>,
    filtered: Vec<KalmanState>,
    log_likelihood: f64,
}

fn filter_pass(
    centers: &[Vector2<f64>],
    prior: &KalmanState,
    noise: &NoiseParams,
) -> Result<FilterPass> {
    let mut predicted = Vec::with_capacity(centers.len());
    let mut filtered = Vec::with_capacity(centers.len());
    let mut log_likelihood = 0.0;
    let mut current = *prior;
    for (t, z) in centers.iter().enumerate() {
        let pred = if t == 0 {
            current
        } else {
            predict_unchecked(&current, &noise.q, 1.0)
        };
        let (post, ll) = update_unchecked(&pred, *z, &noise.r)
            .ok_or_else(|| Error::NotPsd("innovation covariance is singular".into()))?;
        log_likelihood += ll;
        predicted.push(pred);
        filtered.push(post);
        current = post;
    }
    Ok(FilterPass {
        predicted,
        filtered,
        log_likelihood,
    })
}

/// Marginal log-likelihood of `centers` under the model.
pub fn log_likelihood(centers: &[[f64; 2]], prior: &KalmanState, noise: &NoiseParams) -> Result<f64> {
    let zs: Vec<Vector2<f64>> = centers.iter().map(|c| Vector2::new(c[0], c[1])).collect();
    Ok(filter_pass(&zs, prior, noise)?.log_likelihood)
}

/// Smoothed means, covariances and lag-one cross covariances `Cov(x_t, x_{t−1})`.
struct Smoothed {
    states: Vec<KalmanState>,
    lag_one: Vec<Matrix4<f64>>,
}

fn smooth(pass: &FilterPass) -> Option<Smoothed> {
    let t_len = pass.filtered.len();
    let f = transition(1.0);
    let mut states = pass.filtered.clone();
    let mut lag_one = vec![Matrix4::zeros(); t_len];
    for t in (0..t_len - 1).rev() {
        let pred_next = &pass.predicted[t + 1];
        let gain = pass.filtered[t].p * f.transpose() * pred_next.p.try_inverse()?;
        let next = states[t + 1];
        let x = pass.filtered[t].x + gain * (next.x - pred_next.x);
        let p = symmetrize4(
            &(pass.filtered[t].p + gain * (next.p - pred_next.p) * gain.transpose()),
        );
        lag_one[t + 1] = next.p * gain.transpose();
        states[t] = KalmanState { x, p };
    }
    Some(Smoothed { states, lag_one })
}

/// Result of an EM run.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub noise: NoiseParams,
    pub prior: KalmanState,
    /// Log-likelihood before each iteration, then after the last one.
    pub log_likelihoods: Vec<f64>,
}

/// Fits `Q` and `R` to a track of observed centers.
pub fn em_fit(centers: &[[f64; 2]], iterations: usize) -> Result<NoiseParams> {
    Ok(em_fit_traced(centers, iterations)?.noise)
}

pub fn em_fit_traced(centers: &[[f64; 2]], iterations: usize) -> Result<EmFit> {
    if centers.len() < 4 {
        return Err(Error::InvalidParameter(format!(
            "EM needs at least 4 centers, got {}",
            centers.len()
        )));
    }
    if centers.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("centers must be finite".into()));
    }
    let zs: Vec<Vector2<f64>> = centers.iter().map(|c| Vector2::new(c[0], c[1])).collect();
    let (prior, mut noise) = initial_guess(&zs);

    let mut log_likelihoods = Vec::with_capacity(iterations + 1);
    let mut pass = filter_pass(&zs, &prior, &noise)?;
    log_likelihoods.push(pass.log_likelihood);
    for _ in 0..iterations {
        let Some(smoothed) = smooth(&pass) else {
            break;
        };
        noise = m_step(&zs, &smoothed);
        pass = filter_pass(&zs, &prior, &noise)?;
        log_likelihoods.push(pass.log_likelihood);
    }
    Ok(EmFit {
        noise,
        prior,
        log_likelihoods,
    })
}

/// Moment-based starting point: second differences of the track measure the
/// combined noise level.
fn initial_guess(zs: &[Vector2<f64>]) -> (KalmanState, NoiseParams) {
    let mut second = Vector2::zeros();
    for w in zs.windows(3) {
        let d2 = w[2] - w[1] * 2.0 + w[0];
        second += d2.component_mul(&d2);
    }
    second /= (zs.len() - 2) as f64;
    let r0 = (second / 6.0).map(|v| v.max(COVARIANCE_FLOOR));
    let q_vel = (second / 6.0).map(|v| v.max(COVARIANCE_FLOOR));

    let velocity = zs[1] - zs[0];
    let prior = KalmanState {
        x: Vector4::new(zs[0][0], zs[0][1], velocity[0], velocity[1]),
        p: Matrix4::from_diagonal(&Vector4::new(r0[0], r0[1], 2.0 * r0[0], 2.0 * r0[1])),
    };
    let noise = NoiseParams {
        q: Matrix4::from_diagonal(&Vector4::new(
            0.1 * q_vel[0],
            0.1 * q_vel[1],
            q_vel[0],
            q_vel[1],
        )),
        r: Matrix2::from_diagonal(&r0),
    };
    (prior, noise)
}

fn m_step(zs: &[Vector2<f64>], smoothed: &Smoothed) -> NoiseParams {
    let f = transition(1.0);
    let h = observation();
    let t_len = zs.len();
    let states = &smoothed.states;

    let mut s11 = Matrix4::zeros();
    let mut s10 = Matrix4::zeros();
    let mut s00 = Matrix4::zeros();
    for t in 1..t_len {
        let cur = &states[t];
        let prev = &states[t - 1];
        s11 += cur.x * cur.x.transpose() + cur.p;
        s10 += cur.x * prev.x.transpose() + smoothed.lag_one[t];
        s00 += prev.x * prev.x.transpose() + prev.p;
    }
    let q = (s11 - s10 * f.transpose() - f * s10.transpose() + f * s00 * f.transpose())
        / (t_len - 1) as f64;

    let mut r = Matrix2::zeros();
    for (z, s) in zs.iter().zip(states) {
        let resid = z - h * s.x;
        r += resid * resid.transpose() + h * s.p * h.transpose();
    }
    r /= t_len as f64;

    NoiseParams {
        q: floor_psd4(&q),
        r: floor_psd2(&r),
    }
}

fn floor_psd4(m: &Matrix4<f64>) -> Matrix4<f64> {
    let eig = SymmetricEigen::new(symmetrize4(m));
    let vals = eig.eigenvalues.map(|v| v.max(0.0));
    let mut out = symmetrize4(&(eig.eigenvectors * Matrix4::from_diagonal(&vals) * eig.eigenvectors.transpose()));
    for i in 0..4 {
        out[(i, i)] = out[(i, i)].max(COVARIANCE_FLOOR);
    }
    out
}

fn floor_psd2(m: &Matrix2<f64>) -> Matrix2<f64> {
    let eig = SymmetricEigen::new(symmetrize2(m));
    let vals = eig.eigenvalues.map(|v| v.max(0.0));
    let mut out = symmetrize2(&(eig.eigenvectors * Matrix2::from_diagonal(&vals) * eig.eigenvectors.transpose()));
    for i in 0..2 {
        out[(i, i)] = out[(i, i)].max(COVARIANCE_FLOOR);
    }
    out
}
