use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{HarnessError, Result};
use crate::envs::{ChainEnvConfig, EnvKind, LqrEnvConfig};
use crate::net::{NetConfig, OutputHead};
use crate::ppo::{LrSchedule, PpoConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvChoice {
    Chain,
    Lqr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub seed: u64,
    pub iterations: usize,
    pub steps_per_iteration: usize,
    /// Parallel environment slots; must divide `steps_per_iteration`.
    pub envs: usize,
    pub workers: usize,
    pub eval_episodes: usize,
    /// Write a checkpoint every this many iterations (0 = final only).
    pub checkpoint_every: usize,
    pub output_dir: PathBuf,
    /// Record real elapsed time in the metrics. Off by default because it
    /// makes the CSV differ between otherwise identical runs.
    pub wall_clock: bool,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 100,
            steps_per_iteration: 4096,
            envs: 8,
            workers: 1,
            eval_episodes: 20,
            checkpoint_every: 50,
            output_dir: PathBuf::from("run"),
            wall_clock: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub env: EnvChoice,
    pub chain: ChainEnvConfig,
    pub lqr: LqrEnvConfig,
    pub root_skip: bool,
    pub net: NetConfig,
    pub ppo: PpoConfig,
    pub run: RunSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvChoice::Chain,
            chain: ChainEnvConfig::default(),
            lqr: LqrEnvConfig::default(),
            root_skip: false,
            net: NetConfig::default(),
            ppo: PpoConfig::default(),
            run: RunSettings::default(),
        }
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "env.kind",
    "morphology.n_links",
    "morphology.root_skip",
    "chain.dt",
    "chain.damping",
    "chain.gravity",
    "chain.link_length",
    "chain.link_mass",
    "chain.torque_limit",
    "chain.horizon",
    "chain.action_cost",
    "lqr.a",
    "lqr.b",
    "lqr.q",
    "lqr.r",
    "lqr.gamma",
    "lqr.horizon",
    "lqr.x0_min",
    "lqr.x0_max",
    "net.hidden_size",
    "net.vector_channels",
    "net.propagation_steps",
    "net.message_hidden",
    "net.output_head",
    "net.init_log_std",
    "ppo.gamma",
    "ppo.lam",
    "ppo.clip_eps",
    "ppo.kl_coef",
    "ppo.value_coef",
    "ppo.epochs",
    "ppo.minibatch_size",
    "ppo.lr",
    "ppo.lr_schedule",
    "ppo.kl_target",
    "ppo.grad_norm_clip",
    "ppo.normalize_adv",
    "run.seed",
    "run.iterations",
    "run.steps_per_iteration",
    "run.envs",
    "run.workers",
    "run.eval_episodes",
    "run.checkpoint_every",
    "run.output_dir",
    "run.wall_clock",
    "ablation.subequivariant",
    "ablation.direction_vectors_zeroed",
];

fn parse<T: FromStr>(value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse {value:?}"))
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected true or false, got {value:?}")),
    }
}

impl RunConfig {
    pub fn env_kind(&self) -> EnvKind {
        match self.env {
            EnvChoice::Chain => EnvKind::Chain(self.chain.clone()),
            EnvChoice::Lqr => EnvKind::Lqr(self.lqr.clone()),
        }
    }

    /// Network configuration with the output head sized for the configured
    /// morphology.
    pub fn net_config(&self) -> NetConfig {
        let mut net = self.net.clone();
        if let OutputHead::Separate { .. } = net.output_head {
            let nodes = match self.env {
                EnvChoice::Chain => self.chain.n_links + 1,
                EnvChoice::Lqr => 2,
            };
            net.output_head = OutputHead::Separate { nodes };
        }
        net
    }

    pub fn steps_per_slot(&self) -> usize {
        self.run.steps_per_iteration / self.run.envs
    }

    /// Applies one `key = value` assignment. Errors carry no line number.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "env.kind" => {
                self.env = match value {
                    "chain" => EnvChoice::Chain,
                    "lqr" => EnvChoice::Lqr,
                    _ => return Err(format!("expected chain or lqr, got {value:?}")),
                }
            }
            "morphology.n_links" => self.chain.n_links = parse(value)?,
            "morphology.root_skip" => self.root_skip = parse_bool(value)?,
            "chain.dt" => self.chain.dt = parse(value)?,
            "chain.damping" => self.chain.damping = parse(value)?,
            "chain.gravity" => self.chain.gravity = parse(value)?,
            "chain.link_length" => self.chain.link_length = parse(value)?,
            "chain.link_mass" => self.chain.link_mass = parse(value)?,
            "chain.torque_limit" => self.chain.torque_limit = parse(value)?,
            "chain.horizon" => self.chain.horizon = parse(value)?,
            "chain.action_cost" => self.chain.action_cost = parse(value)?,
            "lqr.a" => self.lqr.a = parse(value)?,
            "lqr.b" => self.lqr.b = parse(value)?,
            "lqr.q" => self.lqr.q = parse(value)?,
            "lqr.r" => self.lqr.r = parse(value)?,
            "lqr.gamma" => self.lqr.gamma = parse(value)?,
            "lqr.horizon" => self.lqr.horizon = parse(value)?,
            "lqr.x0_min" => self.lqr.x0_range.0 = parse(value)?,
            "lqr.x0_max" => self.lqr.x0_range.1 = parse(value)?,
            "net.hidden_size" => self.net.hidden = parse(value)?,
            "net.vector_channels" => self.net.vector_channels = parse(value)?,
            "net.propagation_steps" => self.net.propagation_steps = parse(value)?,
            "net.message_hidden" => self.net.message_hidden = parse(value)?,
            "net.output_head" => {
                self.net.output_head = match value {
                    "shared" => OutputHead::Shared,
                    "separate" => OutputHead::Separate { nodes: 0 },
                    _ => return Err(format!("expected shared or separate, got {value:?}")),
                }
            }
            "net.init_log_std" => self.net.init_log_std = parse(value)?,
            "ppo.gamma" => self.ppo.gamma = parse(value)?,
            "ppo.lam" => self.ppo.lam = parse(value)?,
            "ppo.clip_eps" => self.ppo.clip_eps = parse(value)?,
            "ppo.kl_coef" => self.ppo.kl_coef = parse(value)?,
            "ppo.value_coef" => self.ppo.value_coef = parse(value)?,
            "ppo.epochs" => self.ppo.epochs = parse(value)?,
            "ppo.minibatch_size" => self.ppo.minibatch_size = parse(value)?,
            "ppo.lr" => self.ppo.lr = parse(value)?,
            "ppo.lr_schedule" => {
                self.ppo.lr_schedule = match value {
                    "constant" => LrSchedule::Constant,
                    "adaptive" => LrSchedule::Adaptive,
                    _ => return Err(format!("expected constant or adaptive, got {value:?}")),
                }
            }
            "ppo.kl_target" => self.ppo.kl_target = parse(value)?,
            "ppo.grad_norm_clip" => self.ppo.grad_norm_clip = parse(value)?,
            "ppo.normalize_adv" => self.ppo.normalize_adv = parse_bool(value)?,
            "run.seed" => self.run.seed = parse(value)?,
            "run.iterations" => self.run.iterations = parse(value)?,
            "run.steps_per_iteration" => self.run.steps_per_iteration = parse(value)?,
            "run.envs" => self.run.envs = parse(value)?,
            "run.workers" => self.run.workers = parse(value)?,
            "run.eval_episodes" => self.run.eval_episodes = parse(value)?,
            "run.checkpoint_every" => self.run.checkpoint_every = parse(value)?,
            "run.output_dir" => self.run.output_dir = PathBuf::from(value),
            "run.wall_clock" => self.run.wall_clock = parse_bool(value)?,
            "ablation.subequivariant" => self.net.subequivariant = parse_bool(value)?,
            "ablation.direction_vectors_zeroed" => self.net.zero_directions = parse_bool(value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// The current value of `key`, formatted so that [`RunConfig::set`]
    /// restores it exactly.
    pub fn get(&self, key: &str) -> Option<String> {
        fn s(x: impl Display) -> Option<String> {
            Some(x.to_string())
        }
        match key {
            "env.kind" => s(match self.env {
                EnvChoice::Chain => "chain",
                EnvChoice::Lqr => "lqr",
            }),
            "morphology.n_links" => s(self.chain.n_links),
            "morphology.root_skip" => s(self.root_skip),
            "chain.dt" => s(self.chain.dt),
            "chain.damping" => s(self.chain.damping),
            "chain.gravity" => s(self.chain.gravity),
            "chain.link_length" => s(self.chain.link_length),
            "chain.link_mass" => s(self.chain.link_mass),
            "chain.torque_limit" => s(self.chain.torque_limit),
            "chain.horizon" => s(self.chain.horizon),
            "chain.action_cost" => s(self.chain.action_cost),
            "lqr.a" => s(self.lqr.a),
            "lqr.b" => s(self.lqr.b),
            "lqr.q" => s(self.lqr.q),
            "lqr.r" => s(self.lqr.r),
            "lqr.gamma" => s(self.lqr.gamma),
            "lqr.horizon" => s(self.lqr.horizon),
            "lqr.x0_min" => s(self.lqr.x0_range.0),
            "lqr.x0_max" => s(self.lqr.x0_range.1),
            "net.hidden_size" => s(self.net.hidden),
            "net.vector_channels" => s(self.net.vector_channels),
            "net.propagation_steps" => s(self.net.propagation_steps),
            "net.message_hidden" => s(self.net.message_hidden),
            "net.output_head" => s(match self.net.output_head {
                OutputHead::Shared => "shared",
                OutputHead::Separate { .. } => "separate",
            }),
            "net.init_log_std" => s(self.net.init_log_std),
            "ppo.gamma" => s(self.ppo.gamma),
            "ppo.lam" => s(self.ppo.lam),
            "ppo.clip_eps" => s(self.ppo.clip_eps),
            "ppo.kl_coef" => s(self.ppo.kl_coef),
            "ppo.value_coef" => s(self.ppo.value_coef),
            "ppo.epochs" => s(self.ppo.epochs),
            "ppo.minibatch_size" => s(self.ppo.minibatch_size),
            "ppo.lr" => s(self.ppo.lr),
            "ppo.lr_schedule" => s(match self.ppo.lr_schedule {
                LrSchedule::Constant => "constant",
                LrSchedule::Adaptive => "adaptive",
            }),
            "ppo.kl_target" => s(self.ppo.kl_target),
            "ppo.grad_norm_clip" => s(self.ppo.grad_norm_clip),
            "ppo.normalize_adv" => s(self.ppo.normalize_adv),
            "run.seed" => s(self.run.seed),
            "run.iterations" => s(self.run.iterations),
            "run.steps_per_iteration" => s(self.run.steps_per_iteration),
            "run.envs" => s(self.run.envs),
            "run.workers" => s(self.run.workers),
            "run.eval_episodes" => s(self.run.eval_episodes),
            "run.checkpoint_every" => s(self.run.checkpoint_every),
            "run.output_dir" => s(self.run.output_dir.display()),
            "run.wall_clock" => s(self.run.wall_clock),
            "ablation.subequivariant" => s(self.net.subequivariant),
            "ablation.direction_vectors_zeroed" => s(self.net.zero_directions),
            _ => None,
        }
    }

    /// Range checks; the message names the offending key.
    pub fn validate(&self) -> std::result::Result<(), (String, String)> {
        let err = |k: &str, m: &str| Err((k.to_string(), m.to_string()));
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if self.chain.n_links == 0 {
            return err("morphology.n_links", "must be at least 1");
        }
        for (k, v) in [
            ("chain.dt", self.chain.dt),
            ("chain.link_length", self.chain.link_length),
            ("chain.link_mass", self.chain.link_mass),
            ("chain.torque_limit", self.chain.torque_limit),
        ] {
            if !positive(v) {
                return err(k, "must be positive");
            }
        }
        for (k, v) in [
            ("chain.damping", self.chain.damping),
            ("chain.gravity", self.chain.gravity),
            ("chain.action_cost", self.chain.action_cost),
            ("lqr.q", self.lqr.q),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return err(k, "must be non-negative");
            }
        }
        if !positive(self.lqr.r) {
            return err("lqr.r", "must be positive");
        }
        if !(self.lqr.gamma > 0.0 && self.lqr.gamma <= 1.0) {
            return err("lqr.gamma", "must lie in (0, 1]");
        }
        if self.lqr.x0_range.0 > self.lqr.x0_range.1 {
            return err("lqr.x0_min", "must not exceed lqr.x0_max");
        }
        if self.chain.horizon == 0 {
            return err("chain.horizon", "must be at least 1");
        }
        if self.lqr.horizon == 0 {
            return err("lqr.horizon", "must be at least 1");
        }
        for (k, v) in [
            ("net.hidden_size", self.net.hidden),
            ("net.vector_channels", self.net.vector_channels),
            ("net.propagation_steps", self.net.propagation_steps),
            ("net.message_hidden", self.net.message_hidden),
            ("ppo.epochs", self.ppo.epochs),
            ("ppo.minibatch_size", self.ppo.minibatch_size),
            ("run.steps_per_iteration", self.run.steps_per_iteration),
            ("run.envs", self.run.envs),
            ("run.workers", self.run.workers),
        ] {
            if v == 0 {
                return err(k, "must be at least 1");
            }
        }
        if !(self.ppo.gamma > 0.0 && self.ppo.gamma <= 1.0) {
            return err("ppo.gamma", "must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.ppo.lam) {
            return err("ppo.lam", "must lie in [0, 1]");
        }
        if !positive(self.ppo.clip_eps) {
            return err("ppo.clip_eps", "must be positive");
        }
        for (k, v) in [
            ("ppo.kl_coef", self.ppo.kl_coef),
            ("ppo.value_coef", self.ppo.value_coef),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return err(k, "must be non-negative");
            }
        }
        for (k, v) in [
            ("ppo.lr", self.ppo.lr),
            ("ppo.kl_target", self.ppo.kl_target),
            ("ppo.grad_norm_clip", self.ppo.grad_norm_clip),
        ] {
            if !positive(v) {
                return err(k, "must be positive");
            }
        }
        if !self.net.init_log_std.is_finite() {
            return err("net.init_log_std", "must be finite");
        }
        if !self.run.steps_per_iteration.is_multiple_of(self.run.envs) {
            return err("run.steps_per_iteration", "must be a multiple of run.envs");
        }
        Ok(())
    }

    /// Canonical `key = value` listing of every setting.
    pub fn echo(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("every listed key has a value")))
            .collect()
    }
}

/// Parses config text: one `section.key = value` per line, `#` comments.
/// Missing keys keep their defaults.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut lines = vec![0usize; KEYS.len()];
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(HarnessError::Parse {
                line: line_no,
                message: format!("expected `key = value`, got {line:?}"),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        let Some(slot) = KEYS.iter().position(|k| *k == key) else {
            return Err(HarnessError::UnknownKey {
                line: line_no,
                key: key.to_string(),
            });
        };
        cfg.set(key, value).map_err(|message| HarnessError::Parse { line: line_no, message })?;
        lines[slot] = line_no;
    }
    cfg.validate().map_err(|(key, message)| {
        let line = KEYS.iter().position(|k| *k == key).map(|s| lines[s]).unwrap_or(0);
        HarnessError::Range { key, message, line }
    })?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    parse_config_str(&text)
}

/// Applies `--key=value` overrides on top of `cfg`, then re-validates.
pub fn apply_overrides(mut cfg: RunConfig, overrides: &[String]) -> Result<RunConfig> {
    for arg in overrides {
        let body = arg.strip_prefix("--").unwrap_or(arg);
        let Some((key, value)) = body.split_once('=') else {
            return Err(HarnessError::Usage(format!("override {arg:?} is not of the form --key=value")));
        };
        if !KEYS.contains(&key) {
            return Err(HarnessError::Usage(format!("unknown config key {key:?}")));
        }
        cfg.set(key, value).map_err(|message| HarnessError::Usage(format!("{key}: {message}")))?;
    }
    cfg.validate()
        .map_err(|(key, message)| HarnessError::Usage(format!("{key} {message}")))?;
    Ok(cfg)
}
