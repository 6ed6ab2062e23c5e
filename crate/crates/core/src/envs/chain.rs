//! Planar actuated chain under gravity.
//!
//! Links use world angles (`theta = 0` points "up", i.e. against the gravity
//! direction) with unit inertia and decoupled dynamics; actuation couples
//! neighbouring links through reaction torques.

use std::f64::consts::PI;

use super::{EnvError, Observation, StepResult, UP_2D};
use crate::morphology::MorphologyGraph;
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq)]
pub struct ChainEnvConfig {
    pub n_links: usize,
    pub dt: f64,
    pub damping: f64,
    pub gravity: f64,
    pub link_length: f64,
    pub link_mass: f64,
    pub torque_limit: f64,
    pub horizon: usize,
    pub action_cost: f64,
}

impl Default for ChainEnvConfig {
    fn default() -> Self {
        Self {
            n_links: 3,
            dt: 0.02,
            damping: 0.1,
            gravity: 9.81,
            link_length: 1.0,
            link_mass: 1.0,
            torque_limit: 1.0,
            horizon: 200,
            action_cost: 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub theta: Vec<f64>,
    pub omega: Vec<f64>,
    pub t: usize,
}

impl ChainState {
    /// Mirror image through the vertical axis.
    pub fn reflect(&self) -> Self {
        Self {
            theta: self.theta.iter().map(|x| -x).collect(),
            omega: self.omega.iter().map(|x| -x).collect(),
            t: self.t,
        }
    }
}

/// Hanging start, each angle uniform in `[pi - 0.1, pi + 0.1]`.
pub fn chain_reset(cfg: &ChainEnvConfig, rng: &mut RngStream) -> ChainState {
    ChainState {
        theta: (0..cfg.n_links)
            .map(|_| rng.uniform_range(PI - 0.1, PI + 0.1))
            .collect(),
        omega: vec![0.0; cfg.n_links],
        t: 0,
    }
}

/// One semi-implicit Euler step. `torques` is indexed by graph node, so
/// entry 0 (the root) is ignored and entry `k + 1` drives link `k`.
pub fn chain_step(
    state: &ChainState,
    torques: &[f64],
    cfg: &ChainEnvConfig,
) -> Result<StepResult<ChainState>, EnvError> {
    let n = state.theta.len();
    if torques.len() != n + 1 {
        return Err(EnvError::ActionCount {
            expected: n + 1,
            found: torques.len(),
        });
    }
    if let Some(&bad) = torques.iter().find(|x| !x.is_finite()) {
        return Err(EnvError::NonFiniteAction(bad));
    }
    let tau: Vec<f64> = torques[1..]
        .iter()
        .map(|x| x.clamp(-cfg.torque_limit, cfg.torque_limit))
        .collect();
    let g_over_l = cfg.gravity / cfg.link_length;
    let mut theta = Vec::with_capacity(n);
    let mut omega = Vec::with_capacity(n);
    for k in 0..n {
        let reaction = if k + 1 < n { tau[k + 1] } else { 0.0 };
        let net = tau[k] - reaction;
        let w = state.omega[k]
            + cfg.dt * (net - cfg.damping * state.omega[k] - g_over_l * state.theta[k].sin());
        omega.push(w);
        theta.push(state.theta[k] + cfg.dt * w);
    }
    let upright = theta.iter().map(|x| x.cos()).sum::<f64>() / n as f64;
    let effort = tau.iter().map(|x| x * x).sum::<f64>();
    let t = state.t + 1;
    Ok(StepResult {
        state: ChainState { theta, omega, t },
        reward: upright - cfg.action_cost * effort,
        done: t >= cfg.horizon,
    })
}

/// Maps a chain state onto the morphology graph: node `k + 1` carries link
/// `k`'s midpoint position, direction and midpoint velocity; the root
/// carries the mean position and velocity and a zero direction.
pub fn chain_observe(
    state: &ChainState,
    graph: &MorphologyGraph,
    cfg: &ChainEnvConfig,
) -> Result<Observation, EnvError> {
    let n = state.theta.len();
    if graph.node_count() != n + 1 {
        return Err(EnvError::NodeCount {
            expected: n + 1,
            found: graph.node_count(),
        });
    }
    let l = cfg.link_length;
    let mut obs = Observation::zeros(2, n + 1);
    let mut base = [0.0, 0.0];
    let mut base_vel = [0.0, 0.0];
    let mut mean_pos = [0.0, 0.0];
    let mut mean_vel = [0.0, 0.0];
    for k in 0..n {
        let (s, c) = state.theta[k].sin_cos();
        // sin(theta) along +x, cos(theta) along "up".
        let dir = [s + c * UP_2D[0], c * UP_2D[1]];
        let ddir = [state.omega[k] * c, -state.omega[k] * s];
        let node = k + 1;
        for a in 0..2 {
            let p = base[a] + 0.5 * l * dir[a];
            let v = base_vel[a] + 0.5 * l * ddir[a];
            obs.positions[node * 2 + a] = p;
            obs.directions[node * 2 + a] = dir[a];
            obs.velocities[node * 2 + a] = v;
            mean_pos[a] += p / n as f64;
            mean_vel[a] += v / n as f64;
            base[a] += l * dir[a];
            base_vel[a] += l * ddir[a];
        }
        obs.spins[node] = state.omega[k];
    }
    obs.positions[..2].copy_from_slice(&mean_pos);
    obs.velocities[..2].copy_from_slice(&mean_vel);
    Ok(obs)
}
