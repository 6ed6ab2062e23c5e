//! Desk-scale environments: the planar gravity chain and a scalar LQR task.

mod chain;
mod lqr;

pub use chain::{chain_observe, chain_reset, chain_step, ChainEnvConfig, ChainState};
pub use lqr::{lqr_observe, lqr_optimal_gain, lqr_reset, lqr_riccati, lqr_step, LqrEnvConfig, LqrState};

use thiserror::Error;

use crate::morphology::{MorphologyError, MorphologyGraph};
use crate::rng::RngStream;

/// Planar gravity direction.
pub const GRAVITY_2D: [f64; 2] = [0.0, -1.0];
/// Planar "up", the negated gravity direction.
pub const UP_2D: [f64; 2] = [0.0, 1.0];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("non-finite action {0}")]
    NonFiniteAction(f64),
    #[error("expected {expected} actions, got {found}")]
    ActionCount { expected: usize, found: usize },
    #[error("observation needs {expected} graph nodes, graph has {found}")]
    NodeCount { expected: usize, found: usize },
    #[error(transparent)]
    Morphology(#[from] MorphologyError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult<S> {
    pub state: S,
    pub reward: f64,
    pub done: bool,
}

/// Per-node geometric observation in world coordinates.
///
/// Vector fields are `n x dim`, row-major by node. `spins` holds each node's
/// angular velocity (a pseudo-scalar).
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub dim: usize,
    pub positions: Vec<f64>,
    pub directions: Vec<f64>,
    pub velocities: Vec<f64>,
    pub spins: Vec<f64>,
}

impl Observation {
    pub fn zeros(dim: usize, nodes: usize) -> Self {
        Self {
            dim,
            positions: vec![0.0; nodes * dim],
            directions: vec![0.0; nodes * dim],
            velocities: vec![0.0; nodes * dim],
            spins: vec![0.0; nodes],
        }
    }

    pub fn node_count(&self) -> usize {
        self.spins.len()
    }

    pub fn vector<'a>(&self, field: &'a [f64], node: usize) -> &'a [f64] {
        &field[node * self.dim..(node + 1) * self.dim]
    }

    /// Applies the orthogonal map `o` (row-major `dim x dim`) to every vector.
    /// Spins pick up the determinant sign.
    pub fn transformed(&self, o: &[f64]) -> Self {
        let d = self.dim;
        assert_eq!(o.len(), d * d);
        let apply = |field: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; field.len()];
            for (src, dst) in field.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
                for i in 0..d {
                    dst[i] = (0..d).map(|j| o[i * d + j] * src[j]).sum();
                }
            }
            out
        };
        let det_sign = determinant_sign(o, d);
        Self {
            dim: d,
            positions: apply(&self.positions),
            directions: apply(&self.directions),
            velocities: apply(&self.velocities),
            spins: self.spins.iter().map(|s| s * det_sign).collect(),
        }
    }

    /// Mirror through the plane `x = 0`, which contains the gravity axis.
    pub fn reflect_x(&self) -> Self {
        let d = self.dim;
        let mut o = vec![0.0; d * d];
        for i in 0..d {
            o[i * d + i] = if i == 0 { -1.0 } else { 1.0 };
        }
        self.transformed(&o)
    }

    /// Shifts every position by `offset`.
    pub fn translated(&self, offset: &[f64]) -> Self {
        let mut out = self.clone();
        for p in out.positions.chunks_exact_mut(self.dim) {
            for (x, o) in p.iter_mut().zip(offset) {
                *x += o;
            }
        }
        out
    }

    /// Reorders nodes so that old node `i` becomes node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let d = self.dim;
        let mut out = Self::zeros(d, self.node_count());
        for (old, &new) in perm.iter().enumerate() {
            out.positions[new * d..(new + 1) * d].copy_from_slice(self.vector(&self.positions, old));
            out.directions[new * d..(new + 1) * d].copy_from_slice(self.vector(&self.directions, old));
            out.velocities[new * d..(new + 1) * d].copy_from_slice(self.vector(&self.velocities, old));
            out.spins[new] = self.spins[old];
        }
        out
    }
}

fn determinant_sign(o: &[f64], d: usize) -> f64 {
    let det = match d {
        1 => o[0],
        2 => o[0] * o[3] - o[1] * o[2],
        3 => {
            o[0] * (o[4] * o[8] - o[5] * o[7]) - o[1] * (o[3] * o[8] - o[5] * o[6])
                + o[2] * (o[3] * o[7] - o[4] * o[6])
        }
        _ => 1.0,
    };
    det.signum()
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnvKind {
    Chain(ChainEnvConfig),
    Lqr(LqrEnvConfig),
}

impl EnvKind {
    pub fn horizon(&self) -> usize {
        match self {
            EnvKind::Chain(c) => c.horizon,
            EnvKind::Lqr(c) => c.horizon,
        }
    }

    /// The morphology the environment is observed on. LQR always uses a
    /// one-link graph.
    pub fn morphology(&self, root_skip: bool) -> Result<MorphologyGraph, EnvError> {
        Ok(match self {
            EnvKind::Chain(c) => MorphologyGraph::chain(c.n_links, c.link_length, c.link_mass, root_skip)?,
            EnvKind::Lqr(_) => MorphologyGraph::chain(1, 1.0, 1.0, root_skip)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnvState {
    Chain(ChainState),
    Lqr(LqrState),
}

impl EnvState {
    pub fn t(&self) -> usize {
        match self {
            EnvState::Chain(s) => s.t,
            EnvState::Lqr(s) => s.t,
        }
    }
}

/// An environment instance bound to its morphology graph.
#[derive(Debug, Clone)]
pub struct Env {
    kind: EnvKind,
    graph: MorphologyGraph,
    state: EnvState,
}

impl Env {
    /// Builds the environment; the state is reset from `rng`.
    pub fn new(kind: EnvKind, root_skip: bool, rng: &mut RngStream) -> Result<Self, EnvError> {
        let graph = kind.morphology(root_skip)?;
        let state = Self::initial_state(&kind, rng);
        Ok(Self { kind, graph, state })
    }

    fn initial_state(kind: &EnvKind, rng: &mut RngStream) -> EnvState {
        match kind {
            EnvKind::Chain(c) => EnvState::Chain(chain_reset(c, rng)),
            EnvKind::Lqr(c) => EnvState::Lqr(lqr_reset(c, rng)),
        }
    }

    pub fn reset(&mut self, rng: &mut RngStream) {
        self.state = Self::initial_state(&self.kind, rng);
    }

    pub fn kind(&self) -> &EnvKind {
        &self.kind
    }

    pub fn graph(&self) -> &MorphologyGraph {
        &self.graph
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn set_state(&mut self, state: EnvState) {
        self.state = state;
    }

    pub fn observe(&self) -> Result<Observation, EnvError> {
        match (&self.kind, &self.state) {
            (EnvKind::Chain(c), EnvState::Chain(s)) => chain_observe(s, &self.graph, c),
            (EnvKind::Lqr(_), EnvState::Lqr(s)) => Ok(lqr_observe(s)),
            _ => unreachable!("state always matches the environment kind"),
        }
    }

    /// Advances one step with node-indexed actions; the root entry is ignored.
    pub fn step(&mut self, actions: &[f64]) -> Result<(f64, bool), EnvError> {
        let (reward, done) = match (&self.kind, &self.state) {
            (EnvKind::Chain(c), EnvState::Chain(s)) => {
                let out = chain_step(s, actions, c)?;
                self.state = EnvState::Chain(out.state);
                (out.reward, out.done)
            }
            (EnvKind::Lqr(c), EnvState::Lqr(s)) => {
                if actions.len() != 2 {
                    return Err(EnvError::ActionCount {
                        expected: 2,
                        found: actions.len(),
                    });
                }
                let out = lqr_step(s, actions[1], c)?;
                self.state = EnvState::Lqr(out.state);
                (out.reward, out.done)
            }
            _ => unreachable!("state always matches the environment kind"),
        };
        Ok((reward, done))
    }
}
