//! Scalar discounted linear-quadratic regulator with a closed-form optimum.
//!
//! The state is presented to the graph policy on a one-link morphology: the
//! root sits at the origin and the joint at `(x, 0)` with its direction fixed
//! to "up", so the torque readout `cross(up, mu) = -mu_x` acts as `u`.

use super::{EnvError, Observation, StepResult, UP_2D};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq)]
pub struct LqrEnvConfig {
    pub a: f64,
    pub b: f64,
    pub q: f64,
    pub r: f64,
    pub gamma: f64,
    pub horizon: usize,
    pub x0_range: (f64, f64),
}

impl Default for LqrEnvConfig {
    fn default() -> Self {
        Self {
            a: 1.0,
            b: 0.1,
            q: 1.0,
            r: 0.1,
            gamma: 0.99,
            horizon: 50,
            x0_range: (-1.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqrState {
    pub x: f64,
    pub t: usize,
}

pub fn lqr_reset(cfg: &LqrEnvConfig, rng: &mut RngStream) -> LqrState {
    LqrState {
        x: rng.uniform_range(cfg.x0_range.0, cfg.x0_range.1),
        t: 0,
    }
}

pub fn lqr_step(state: &LqrState, u: f64, cfg: &LqrEnvConfig) -> Result<StepResult<LqrState>, EnvError> {
    if !u.is_finite() {
        return Err(EnvError::NonFiniteAction(u));
    }
    let x = state.x;
    let t = state.t + 1;
    Ok(StepResult {
        state: LqrState {
            x: cfg.a * x + cfg.b * u,
            t,
        },
        reward: -(cfg.q * x * x + cfg.r * u * u),
        done: t >= cfg.horizon,
    })
}

/// Discounted Riccati fixed point `P` (iterated to 1e-12).
pub fn lqr_riccati(cfg: &LqrEnvConfig) -> f64 {
    let LqrEnvConfig { a, b, q, r, gamma, .. } = *cfg;
    let mut p = q;
    for _ in 0..10_000_000 {
        let next = q + gamma * a * a * p - (gamma * a * b * p).powi(2) / (r + gamma * b * b * p);
        if (next - p).abs() <= 1e-12 * next.abs().max(1.0) {
            return next;
        }
        p = next;
    }
    p
}

/// Optimal feedback gain `k*`; the optimal control is `u = -k* x`.
pub fn lqr_optimal_gain(cfg: &LqrEnvConfig) -> f64 {
    let p = lqr_riccati(cfg);
    cfg.gamma * cfg.a * cfg.b * p / (cfg.r + cfg.gamma * cfg.b * cfg.b * p)
}

/// Observation on the one-link graph (root, joint).
pub fn lqr_observe(state: &LqrState) -> Observation {
    let mut obs = Observation::zeros(2, 2);
    obs.positions[2] = state.x;
    obs.directions[2..4].copy_from_slice(&UP_2D);
    obs
}
