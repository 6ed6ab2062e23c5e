//! Configuration, the training loop, persistence and verification commands.

mod checkpoint;
mod checks;
mod config;
mod metrics;
mod plot;
mod train;

pub use checkpoint::{Checkpoint, SlotSnapshot, CHECKPOINT_VERSION};
pub use checks::{
    check_equivariance, grad_check, reflection_suite, subequivariance_suite, CheckLine, GradReport,
    Report,
};
pub use config::{apply_overrides, parse_config, parse_config_str, EnvChoice, RunConfig, RunSettings, KEYS};
pub use metrics::{read_metrics, sig9, MetricsRow, MetricsWriter, METRICS_HEADER};
pub use plot::plot;
pub use train::{evaluate, evaluate_params, train, EvalResult, TrainSummary, Trainer};

use std::path::PathBuf;

use thiserror::Error;

use crate::envs::EnvError;
use crate::net::NetError;
use crate::ppo::PpoError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HarnessError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: {key} {message}")]
    Range { key: String, message: String, line: usize },
    #[error("{0}")]
    Usage(String),
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint format version {found}, this build reads {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("numerical failure at iteration {iteration}: {message}")]
    NonFinite { iteration: usize, message: String },
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("image: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    /// Process exit status: 3 for numerical failures, 1 for everything else.
    /// Verification commands return 2 themselves when a check fails.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::NonFinite { .. }
            | HarnessError::Ppo(PpoError::NonFinite { .. })
            | HarnessError::Ppo(PpoError::Env(EnvError::NonFiniteAction(_)))
            | HarnessError::Env(EnvError::NonFiniteAction(_)) => 3,
            _ => 1,
        }
    }
}
