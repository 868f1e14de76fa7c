//! Force-tracking control of the haptic channel.
//!
//! The device/environment is modelled as a scalar linear parameter-varying
//! system
//!
//! ```text
//! x[k+1] = (a0 + a1 * theta[k]) * x[k] + b * u[k]
//! ```
//!
//! where `x` is the force delivered at the handle (N), `u` the commanded force
//! (N) and `theta` a scheduling parameter taken from the tissue tangent
//! stiffness. [`identify_lpv`] fits `(a0, a1, b)` by least squares and
//! [`mpc_step`] solves a box-constrained receding-horizon tracking problem with
//! `theta` frozen over the horizon.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::log::SessionRecord;
use crate::scene::Vec3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error("identification log is empty")]
    EmptyLog,
    #[error("identification needs at least 3 samples, got {0}")]
    TooFewSamples(usize),
    #[error("regression is rank deficient (condition {0:e}); inputs are not exciting")]
    RankDeficient(f64),
    #[error("invalid controller configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LpvModel {
    pub a0: f64,
    pub a1: f64,
    pub b: f64,
    pub theta_bounds: [f64; 2],
}

impl Default for LpvModel {
    fn default() -> Self {
        Self {
            a0: 0.6,
            a1: 5e-4,
            b: 0.4,
            theta_bounds: [0.0, 250.0],
        }
    }
}

impl LpvModel {
    pub fn a(&self, theta: f64) -> f64 {
        self.a0 + self.a1 * theta
    }

    /// Scheduling parameter from tissue tangent stiffness, clipped to bounds.
    pub fn schedule_theta(&self, stiffness: f64) -> f64 {
        let [lo, hi] = self.theta_bounds;
        stiffness.max(0.0).clamp(lo, hi)
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        let [lo, hi] = self.theta_bounds;
        if !(lo <= hi) {
            return Err(ControlError::InvalidConfig(format!(
                "theta bounds [{lo}, {hi}] are inverted"
            )));
        }
        if ![self.a0, self.a1, self.b].iter().all(|c| c.is_finite()) {
            return Err(ControlError::InvalidConfig("non-finite model coefficient".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    pub q: f64,
    pub r: f64,
    pub u_max: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            q: 1.0,
            r: 1e-4,
            u_max: 3.3,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), ControlError> {
        if self.horizon < 1 {
            return Err(ControlError::InvalidConfig("horizon must be >= 1".into()));
        }
        if !(self.q > 0.0 && self.r > 0.0 && self.u_max > 0.0) {
            return Err(ControlError::InvalidConfig(
                "q, r and u_max must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// First input of the horizon-`N` tracking problem
///
/// ```text
/// min  sum_{k=1..N} q (x_k - ref_k)^2 + sum_{k=0..N-1} r u_k^2
/// s.t. x_{k+1} = a(theta) x_k + b u_k,  |u_k| <= u_max
/// ```
///
/// `reference[0]` is the target for `x_1`. A short reference is padded by
/// holding its last value; an empty one holds the current state.
pub fn mpc_step(model: &LpvModel, theta: f64, state: f64, reference: &[f64], cfg: &MpcConfig) -> f64 {
    let n = cfg.horizon.max(1);
    let a = model.a(theta);
    let hold = reference.last().copied().unwrap_or(state);
    let target = |k: usize| reference.get(k).copied().unwrap_or(hold);

    // x = free + G u with G[k][j] = a^(k-j) b for j <= k
    let mut powers = vec![1.0; n + 1];
    for k in 1..=n {
        powers[k] = powers[k - 1] * a;
    }
    let g = DMatrix::from_fn(n, n, |k, j| if j <= k { powers[k - j] * model.b } else { 0.0 });
    let offset = DVector::from_fn(n, |k, _| powers[k + 1] * state - target(k));

    let gt = g.transpose();
    let mut hessian = &gt * &g * cfg.q;
    for i in 0..n {
        hessian[(i, i)] += cfg.r;
    }
    let linear = &gt * &offset * cfg.q;

    let u = solve_box_qp(&hessian, &linear, cfg.u_max);
    u[0].clamp(-cfg.u_max, cfg.u_max)
}

/// Primal active-set solver for `min 1/2 u'Hu + g'u` with `|u_i| <= bound`.
/// `H` must be symmetric positive definite.
fn solve_box_qp(h: &DMatrix<f64>, g: &DVector<f64>, bound: f64) -> DVector<f64> {
    let n = g.len();
    let unconstrained = h
        .clone()
        .cholesky()
        .map(|c| c.solve(&(-g)))
        .unwrap_or_else(|| DVector::zeros(n));

    // fixed[i] = Some(+1 | -1) when u_i sits on the upper/lower bound
    let mut fixed: Vec<Option<f64>> = vec![None; n];
    let mut u = DVector::zeros(n);
    for i in 0..n {
        let v = unconstrained[i];
        if v >= bound {
            fixed[i] = Some(1.0);
            u[i] = bound;
        } else if v <= -bound {
            fixed[i] = Some(-1.0);
            u[i] = -bound;
        } else {
            u[i] = v;
        }
    }
    if fixed.iter().all(Option::is_none) {
        return u;
    }

    for _ in 0..(10 * n + 10) {
        let free: Vec<usize> = (0..n).filter(|&i| fixed[i].is_none()).collect();
        let mut target = u.clone();
        if !free.is_empty() {
            let hff = DMatrix::from_fn(free.len(), free.len(), |r, c| h[(free[r], free[c])]);
            let rhs = DVector::from_fn(free.len(), |r, _| {
                let i = free[r];
                let coupling: f64 = (0..n)
                    .filter(|&j| fixed[j].is_some())
                    .map(|j| h[(i, j)] * u[j])
                    .sum();
                -(g[i] + coupling)
            });
            let y = match hff.cholesky() {
                Some(c) => c.solve(&rhs),
                None => break,
            };
            for (r, &i) in free.iter().enumerate() {
                target[i] = y[r];
            }
        }

        let step = &target - &u;
        let scale = 1.0 + u.amax();
        if step.amax() <= 1e-13 * scale {
            let grad = h * &u + g;
            let mut worst: Option<(usize, f64)> = None;
            for i in 0..n {
                if let Some(side) = fixed[i] {
                    // KKT: at the upper bound the gradient must be <= 0, at the lower >= 0
                    let violation = side * grad[i];
                    if violation > 1e-12 * (1.0 + grad.amax())
                        && worst.map_or(true, |(_, w)| violation > w)
                    {
                        worst = Some((i, violation));
                    }
                }
            }
            match worst {
                Some((i, _)) => fixed[i] = None,
                None => return u,
            }
            continue;
        }

        let mut alpha = 1.0;
        let mut blocking = None;
        for &i in &free {
            let p = step[i];
            let room = if p > 0.0 {
                (bound - u[i]) / p
            } else if p < 0.0 {
                (-bound - u[i]) / p
            } else {
                continue;
            };
            if room < alpha {
                alpha = room.max(0.0);
                blocking = Some((i, p.signum()));
            }
        }
        u += step * alpha;
        if let Some((i, side)) = blocking {
            fixed[i] = Some(side);
            u[i] = side * bound;
        }
    }
    u.map(|v| v.clamp(-bound, bound))
}

/// One row of an identification log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LpvSample {
    pub theta: f64,
    pub x: f64,
    pub u: f64,
    pub x_next: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Identification {
    pub model: LpvModel,
    pub residual_rms: f64,
}

/// Least-squares fit of `x[k+1] = (a0 + a1 theta[k]) x[k] + b u[k]`.
///
/// When `theta` is constant over the log the `a1` column is collinear with
/// `a0`; the fit then drops it and reports `a1 = 0`.
pub fn identify_lpv(log: &[LpvSample]) -> Result<Identification, ControlError> {
    if log.is_empty() {
        return Err(ControlError::EmptyLog);
    }
    if log.len() < 3 {
        return Err(ControlError::TooFewSamples(log.len()));
    }
    let theta_min = log.iter().map(|s| s.theta).fold(f64::INFINITY, f64::min);
    let theta_max = log.iter().map(|s| s.theta).fold(f64::NEG_INFINITY, f64::max);
    let varying = theta_max > theta_min;

    let cols = if varying { 3 } else { 2 };
    let regressors = DMatrix::from_fn(log.len(), cols, |i, j| {
        let s = &log[i];
        match (varying, j) {
            (_, 0) => s.x,
            (true, 1) => s.theta * s.x,
            _ => s.u,
        }
    });
    let targets = DVector::from_iterator(log.len(), log.iter().map(|s| s.x_next));

    // column scaling keeps the rank test meaningful when theta is large
    let norms: Vec<f64> = (0..cols).map(|j| regressors.column(j).norm()).collect();
    if norms.iter().any(|&n| n == 0.0 || !n.is_finite()) {
        return Err(ControlError::RankDeficient(f64::INFINITY));
    }
    let mut scaled = regressors.clone();
    for (j, &n) in norms.iter().enumerate() {
        scaled.column_mut(j).scale_mut(1.0 / n);
    }
    let svd = scaled.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = smax / smin;
    if !(condition.is_finite() && condition < 1e10) {
        return Err(ControlError::RankDeficient(condition));
    }
    let coef = svd
        .solve(&targets, 0.0)
        .map_err(|_| ControlError::RankDeficient(condition))?;
    let coef: Vec<f64> = coef.iter().zip(&norms).map(|(c, n)| c / n).collect();

    let (a0, a1, b) = if varying {
        (coef[0], coef[1], coef[2])
    } else {
        (coef[0], 0.0, coef[1])
    };
    let fitted = &regressors * DVector::from_iterator(cols, coef.iter().copied());
    let residual_rms = ((&targets - fitted).norm_squared() / log.len() as f64).sqrt();

    Ok(Identification {
        model: LpvModel {
            a0,
            a1,
            b,
            theta_bounds: [theta_min, theta_max],
        },
        residual_rms,
    })
}

/// Identification samples from consecutive log records: `theta` and the
/// predicted device force of tick k, the command along `normal` at tick k,
/// and the predicted device force of tick k + 1.
pub fn lpv_samples(records: &[SessionRecord], normal: &Vec3) -> Vec<LpvSample> {
    records
        .windows(2)
        .filter(|w| w[1].tick == w[0].tick + 1)
        .map(|w| LpvSample {
            theta: w[0].theta,
            x: w[0].device_force,
            u: w[0].emitted_force.dot(normal),
            x_next: w[1].device_force,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    /// Receding-horizon tracking of the tissue force.
    #[default]
    Mpc,
    /// Command equals the reference (no controller).
    PassThrough,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub mode: ControlMode,
    pub model: LpvModel,
    pub mpc: MpcConfig,
}

impl ControlConfig {
    pub fn validate(&self) -> Result<(), ControlError> {
        self.model.validate()?;
        self.mpc.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlOutput {
    pub theta: f64,
    /// Commanded force along the floor normal, N.
    pub command: f64,
    /// Model-predicted handle force before this command is applied, N.
    pub device_force: f64,
}

/// Loop-side controller holding the predicted device force.
#[derive(Debug, Clone)]
pub struct ForceController {
    cfg: ControlConfig,
    device_force: f64,
}

impl ForceController {
    pub fn new(cfg: ControlConfig) -> Self {
        Self {
            cfg,
            device_force: 0.0,
        }
    }

    pub fn config(&self) -> &ControlConfig {
        &self.cfg
    }

    pub fn step(&mut self, stiffness: f64, reference: f64) -> ControlOutput {
        let model = &self.cfg.model;
        let theta = model.schedule_theta(stiffness);
        let device_force = self.device_force;
        let command = match self.cfg.mode {
            ControlMode::PassThrough => reference,
            ControlMode::Mpc => mpc_step(model, theta, device_force, &[reference], &self.cfg.mpc),
        };
        self.device_force = match self.cfg.mode {
            ControlMode::PassThrough => command,
            ControlMode::Mpc => model.a(theta) * device_force + model.b * command,
        };
        ControlOutput {
            theta,
            command,
            device_force,
        }
    }
}
