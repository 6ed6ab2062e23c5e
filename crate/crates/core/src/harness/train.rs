use std::path::{Path, PathBuf};
use std::time::Instant;

use super::checkpoint::{Checkpoint, SlotSnapshot};
use super::config::RunConfig;
use super::metrics::{MetricsRow, MetricsWriter};
use super::{HarnessError, Result};
use crate::envs::{EnvError, EnvKind};
use crate::morphology::MorphologyGraph;
use crate::net::{GravityFrame, NetParams};
use crate::ppo::{adapt_lr, collect_rollout, ppo_update, EnvSlot, LrSchedule, PpoError};
use crate::rng::{Domain, RngStream};
use crate::tensor::AdamState;

fn numerical(iteration: usize, e: PpoError) -> HarnessError {
    match e {
        PpoError::NonFinite { .. } | PpoError::Env(EnvError::NonFiniteAction(_)) => HarnessError::NonFinite {
            iteration,
            message: e.to_string(),
        },
        other => other.into(),
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// All mutable training state.
pub struct Trainer {
    pub config: RunConfig,
    pub params: NetParams,
    pub adam: AdamState,
    pub lr: f64,
    pub iteration: usize,
    pub env_steps: u64,
    shuffle: RngStream,
    slots: Vec<EnvSlot>,
    graph: MorphologyGraph,
    frame: GravityFrame,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config
            .validate()
            .map_err(|(key, message)| HarnessError::Usage(format!("{key} {message}")))?;
        let params = NetParams::init(config.net_config(), &mut RngStream::new(config.run.seed, Domain::Init, 0));
        let kind = config.env_kind();
        let slots = (0..config.run.envs)
            .map(|k| EnvSlot::new(kind.clone(), config.root_skip, config.run.seed, k as u32))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let graph = slots[0].env.graph().clone();
        Ok(Self {
            adam: AdamState::new(params.tensors()),
            lr: config.ppo.lr,
            iteration: 0,
            env_steps: 0,
            shuffle: RngStream::new(config.run.seed, Domain::Shuffle, 0),
            frame: GravityFrame::down(2),
            graph,
            slots,
            params,
            config,
        })
    }

    /// Restores a run. `config` may differ from the saved one only in
    /// settings that do not shape the state (iterations, output paths,
    /// workers and similar).
    pub fn from_checkpoint(ckpt: Checkpoint, config: RunConfig) -> Result<Self> {
        let mut t = Self::new(config)?;
        if t.config.net_config() != ckpt.config.net_config()
            || t.config.env_kind() != ckpt.config.env_kind()
            || t.config.run.envs != ckpt.slots.len()
        {
            return Err(HarnessError::ShapeMismatch(
                "checkpoint network, environment or slot count differs from the configuration".into(),
            ));
        }
        let seed = t.config.run.seed;
        for (k, (slot, snap)) in t.slots.iter_mut().zip(ckpt.slots).enumerate() {
            let k = k as u32;
            slot.reset_rng = RngStream::at(seed, Domain::Env as u32, 2 * k, snap.reset_index);
            slot.noise_rng = RngStream::at(seed, Domain::Env as u32, 2 * k + 1, snap.noise_index);
            slot.episode_return = snap.episode_return;
            slot.env.set_state(snap.state);
        }
        t.params = ckpt.params;
        t.adam = ckpt.adam;
        t.lr = ckpt.lr;
        t.iteration = ckpt.iteration;
        t.env_steps = ckpt.env_steps;
        t.shuffle = RngStream::at(seed, Domain::Shuffle as u32, 0, ckpt.shuffle_index);
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            iteration: self.iteration,
            env_steps: self.env_steps,
            lr: self.lr,
            shuffle_index: self.shuffle.index(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            slots: self
                .slots
                .iter()
                .map(|s| SlotSnapshot {
                    reset_index: s.reset_rng.index(),
                    noise_index: s.noise_rng.index(),
                    episode_return: s.episode_return,
                    state: s.env.state().clone(),
                })
                .collect(),
        }
    }

    pub fn graph(&self) -> &MorphologyGraph {
        &self.graph
    }

    /// One iteration: rollout, PPO update, optional learning-rate adaptation.
    pub fn step(&mut self) -> Result<MetricsRow> {
        let start = Instant::now();
        let next = self.iteration + 1;
        let cfg = &self.config;
        let batch = collect_rollout(
            &mut self.slots,
            &self.params,
            &self.frame,
            cfg.steps_per_slot(),
            cfg.run.workers,
            false,
        )
        .map_err(|e| numerical(next, e))?;
        let lr = self.lr;
        let stats = ppo_update(
            &mut self.params,
            &mut self.adam,
            &self.graph,
            &self.frame,
            &batch,
            &cfg.ppo,
            lr,
            &mut self.shuffle,
        )
        .map_err(|e| numerical(next, e))?;
        if cfg.ppo.lr_schedule == LrSchedule::Adaptive {
            self.lr = adapt_lr(lr, stats.kl, &cfg.ppo);
        }
        self.iteration = next;
        self.env_steps += batch.len() as u64;
        let (mean_return, std_return) = mean_std(&batch.episode_returns);
        Ok(MetricsRow {
            iteration: next,
            env_steps: self.env_steps,
            mean_return,
            std_return,
            kl: stats.kl,
            clip_frac: stats.clip_frac,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            lr,
            wall_clock_seconds: if cfg.run.wall_clock {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub metrics_path: PathBuf,
    pub final_checkpoint: PathBuf,
    pub rows: Vec<MetricsRow>,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io {
        path: dir.to_path_buf(),
        message: e.to_string(),
    })
}

/// Runs (or resumes) training up to `config.run.iterations`, writing
/// `metrics.csv`, periodic `iter_<k>.ckpt` files and `final.ckpt` into the
/// output directory.
pub fn train(config: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    let dir = config.run.output_dir.clone();
    ensure_dir(&dir)?;
    let metrics_path = dir.join("metrics.csv");
    let mut trainer = match resume {
        Some(path) => Trainer::from_checkpoint(Checkpoint::load(path)?, config.clone())?,
        None => Trainer::new(config.clone())?,
    };
    let mut writer = if resume.is_some() {
        MetricsWriter::resume(&metrics_path, trainer.iteration)?
    } else {
        MetricsWriter::create(&metrics_path)?
    };
    let mut rows = Vec::new();
    while trainer.iteration < config.run.iterations {
        let row = trainer.step()?;
        writer.append(&row)?;
        rows.push(row);
        let every = config.run.checkpoint_every;
        if every > 0 && trainer.iteration % every == 0 && trainer.iteration < config.run.iterations {
            trainer
                .checkpoint()
                .save(&dir.join(format!("iter_{}.ckpt", trainer.iteration)))?;
        }
    }
    let final_checkpoint = dir.join("final.ckpt");
    trainer.checkpoint().save(&final_checkpoint)?;
    Ok(TrainSummary {
        metrics_path,
        final_checkpoint,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub mean_return: f64,
    pub std_return: f64,
    pub returns: Vec<f64>,
}

/// Rolls the deterministic policy (actions = mean) for `episodes` episodes
/// of `kind`. Episode `k` starts from stream `2k` of the eval domain.
pub fn evaluate_params(
    params: &NetParams,
    kind: &EnvKind,
    root_skip: bool,
    episodes: usize,
    seed: u64,
    workers: usize,
    trace: Option<&Path>,
) -> Result<EvalResult> {
    if episodes == 0 {
        return Err(HarnessError::Usage("episodes must be at least 1".into()));
    }
    let mut slots = (0..episodes)
        .map(|k| EnvSlot::in_domain(kind.clone(), root_skip, seed, k as u32, Domain::Eval))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    params.check_graph(slots[0].env.graph())?;
    let batch = collect_rollout(
        &mut slots,
        params,
        &GravityFrame::down(2),
        kind.horizon(),
        workers,
        true,
    )
    .map_err(|e| numerical(0, e))?;
    if let Some(path) = trace {
        let n = batch.nodes;
        let mut text = String::from("episode,t,reward");
        for v in 0..n {
            text.push_str(&format!(",action_{v}"));
        }
        text.push('\n');
        let h = kind.horizon();
        for i in 0..batch.len() {
            text.push_str(&format!("{},{},{:.16e}", i / h, i % h, batch.rewards[i]));
            for a in &batch.actions[i * n..(i + 1) * n] {
                text.push_str(&format!(",{a:.16e}"));
            }
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| HarnessError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    }
    let (mean_return, std_return) = mean_std(&batch.episode_returns);
    Ok(EvalResult {
        mean_return,
        std_return,
        returns: batch.episode_returns,
    })
}

/// Evaluates a checkpoint, optionally on a chain with a different number
/// of links than it was trained on.
pub fn evaluate(
    ckpt: &Checkpoint,
    episodes: usize,
    seed: u64,
    n_links: Option<usize>,
    trace: Option<&Path>,
) -> Result<EvalResult> {
    let mut kind = ckpt.config.env_kind();
    if let (Some(n), EnvKind::Chain(c)) = (n_links, &mut kind) {
        c.n_links = n;
    }
    evaluate_params(
        &ckpt.params,
        &kind,
        ckpt.config.root_skip,
        episodes,
        seed,
        ckpt.config.run.workers,
        trace,
    )
}
