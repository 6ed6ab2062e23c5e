//! Clipped, KL-penalized PPO with a value regression term.

mod rollout;

pub use rollout::{collect_rollout, make_slots, EnvSlot, RolloutBatch, Segment};

use thiserror::Error;

use crate::envs::{EnvError, Observation};
use crate::morphology::MorphologyGraph;
use crate::net::{
    action_mask, forward_vars, gaussian_entropy, gaussian_kl_var, log_prob_var, BoundParams, GraphBatch,
    GravityFrame, NetError, NetParams,
};
use crate::rng::RngStream;
use crate::tensor::{Adam, AdamState, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PpoError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss at epoch {epoch}, minibatch {minibatch}")]
    NonFinite { epoch: usize, minibatch: usize },
    #[error("policy actions need planar observations")]
    NotPlanar,
    #[error("{0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, PpoError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    Adaptive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lam: f64,
    pub clip_eps: f64,
    pub kl_coef: f64,
    pub value_coef: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub kl_target: f64,
    pub grad_norm_clip: f64,
    pub normalize_adv: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lam: 0.95,
            clip_eps: 0.2,
            kl_coef: 0.01,
            value_coef: 0.5,
            epochs: 4,
            minibatch_size: 256,
            lr: 3e-4,
            lr_schedule: LrSchedule::Constant,
            kl_target: 0.01,
            grad_norm_clip: 0.5,
            normalize_adv: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PpoError::Config(m.into()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lam) {
            return bad("lam must lie in [0, 1]");
        }
        if self.clip_eps <= 0.0 {
            return bad("clip_eps must be positive");
        }
        if self.epochs == 0 || self.minibatch_size == 0 {
            return bad("epochs and minibatch_size must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageEstimate {
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Discounted returns within each episode. A segment that stops mid-episode
/// continues from its bootstrap value.
pub fn compute_returns(batch: &RolloutBatch, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; batch.len()];
    for seg in batch.segment_list() {
        let mut next = seg.bootstrap;
        for t in (seg.start..seg.start + seg.len).rev() {
            let carry = if batch.dones[t] { 0.0 } else { next };
            out[t] = batch.rewards[t] + gamma * carry;
            next = out[t];
        }
    }
    out
}

/// GAE(lambda). Returns are `advantage + value` before any normalization.
pub fn compute_advantage(batch: &RolloutBatch, gamma: f64, lam: f64, normalize: bool) -> AdvantageEstimate {
    let mut adv = vec![0.0; batch.len()];
    for seg in batch.segment_list() {
        let mut next_value = seg.bootstrap;
        let mut next_adv = 0.0;
        for t in (seg.start..seg.start + seg.len).rev() {
            let live = if batch.dones[t] { 0.0 } else { 1.0 };
            let delta = batch.rewards[t] + gamma * next_value * live - batch.values[t];
            adv[t] = delta + gamma * lam * live * next_adv;
            next_adv = adv[t];
            next_value = batch.values[t];
        }
    }
    let returns = adv.iter().zip(&batch.values).map(|(a, v)| a + v).collect();
    if normalize && adv.len() > 1 {
        let n = adv.len() as f64;
        let mean = adv.iter().sum::<f64>() / n;
        let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        adv.iter_mut().for_each(|a| *a = (*a - mean) / (std + 1e-8));
    }
    AdvantageEstimate { advantages: adv, returns }
}

/// `min(A r, A clip(r, 1 - eps, 1 + eps))` for one sample.
pub fn clipped_surrogate(advantage: f64, ratio: f64, eps: f64) -> f64 {
    (advantage * ratio).min(advantage * ratio.clamp(1.0 - eps, 1.0 + eps))
}

/// Loss pieces for one minibatch, still on the tape.
pub struct LossTerms<'t> {
    pub loss: Var<'t>,
    pub surrogate: f64,
    pub kl: f64,
    pub value_loss: f64,
    pub clip_frac: f64,
}

/// Builds the PPO loss for the transitions in `idx`.
#[allow(clippy::too_many_arguments)]
pub fn ppo_loss_terms<'t>(
    tape: &'t Tape,
    params: &NetParams,
    bound: &BoundParams<'t>,
    graph: &MorphologyGraph,
    frame: &GravityFrame,
    batch: &RolloutBatch,
    adv: &AdvantageEstimate,
    idx: &[usize],
    cfg: &PpoConfig,
) -> Result<LossTerms<'t>> {
    let n = batch.nodes;
    let m = idx.len();
    let obs: Vec<Observation> = idx.iter().map(|&t| batch.observations[t].clone()).collect();
    let pick = |src: &[f64]| -> Vec<f64> { idx.iter().flat_map(|&t| src[t * n..(t + 1) * n].iter().copied()).collect() };
    let actions = pick(&batch.actions);
    let mu_old = pick(&batch.means);
    let ls_old = pick(&batch.log_stds);
    let lp_old = Tensor::vector(idx.iter().map(|&t| -batch.log_probs[t]).collect());
    let a_hat = Tensor::vector(idx.iter().map(|&t| adv.advantages[t]).collect());
    let neg_target = Tensor::vector(idx.iter().map(|&t| -adv.returns[t]).collect());
    let mask = action_mask(graph, m);

    let gb = GraphBatch::new(graph, frame, m);
    let out = forward_vars(tape, params, bound, &gb, &obs)?;
    let mean = out.action_mean.ok_or(PpoError::NotPlanar)?;

    let lp_new = log_prob_var(&actions, mean, out.log_std, &mask)?
        .reshape(&[m, n])?
        .sum(Some(1))?;
    let ratio = lp_new.add_const(&lp_old)?.exp();
    let unclipped = ratio.mul_const(&a_hat)?;
    let clipped = ratio.clip(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps).mul_const(&a_hat)?;
    let surrogate = unclipped.min(clipped)?.mean(None)?;
    let kl = gaussian_kl_var(&mu_old, &ls_old, mean, out.log_std, &mask)?
        .reshape(&[m, n])?
        .sum(Some(1))?
        .mean(None)?;
    let value_loss = out.value.add_const(&neg_target)?.square().mean(None)?;
    let loss = surrogate
        .neg()
        .add(kl.scale(cfg.kl_coef))?
        .add(value_loss.scale(cfg.value_coef))?;

    let clip_frac = ratio
        .value()
        .data()
        .iter()
        .filter(|r| (**r - 1.0).abs() > cfg.clip_eps)
        .count() as f64
        / m.max(1) as f64;
    let terms = LossTerms {
        surrogate: surrogate.item(),
        kl: kl.item(),
        value_loss: value_loss.item(),
        clip_frac,
        loss,
    };
    Ok(terms)
}

/// Full-batch PPO loss value.
pub fn ppo_loss(
    params: &NetParams,
    graph: &MorphologyGraph,
    frame: &GravityFrame,
    batch: &RolloutBatch,
    adv: &AdvantageEstimate,
    cfg: &PpoConfig,
) -> Result<f64> {
    let tape = Tape::new();
    let bound = BoundParams::new(&tape, params, false);
    let idx: Vec<usize> = (0..batch.len()).collect();
    let terms = ppo_loss_terms(&tape, params, &bound, graph, frame, batch, adv, &idx, cfg)?;
    Ok(terms.loss.item())
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub kl: f64,
    pub clip_frac: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// `epochs` passes of shuffled minibatch Adam steps. Statistics average the
/// minibatches of the last epoch.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update(
    params: &mut NetParams,
    adam: &mut AdamState,
    graph: &MorphologyGraph,
    frame: &GravityFrame,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    lr: f64,
    shuffle: &mut RngStream,
) -> Result<UpdateStats> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(PpoError::Config("empty rollout batch".into()));
    }
    let adv = compute_advantage(batch, cfg.gamma, cfg.lam, cfg.normalize_adv);
    let optimizer = Adam::default();
    let mut stats = UpdateStats::default();
    for epoch in 0..cfg.epochs {
        let order = shuffle.permutation(batch.len());
        let chunks: Vec<&[usize]> = order.chunks(cfg.minibatch_size).collect();
        let last = epoch + 1 == cfg.epochs;
        if last {
            stats = UpdateStats::default();
        }
        for (mb, idx) in chunks.iter().enumerate() {
            let grads = {
                let tape = Tape::new();
                let bound = BoundParams::new(&tape, params, true);
                let terms = ppo_loss_terms(&tape, params, &bound, graph, frame, batch, &adv, idx, cfg)?;
                if !terms.loss.item().is_finite() {
                    return Err(PpoError::NonFinite { epoch, minibatch: mb });
                }
                if last {
                    let w = 1.0 / chunks.len() as f64;
                    stats.kl += w * terms.kl;
                    stats.clip_frac += w * terms.clip_frac;
                    stats.value_loss += w * terms.value_loss;
                }
                let g = terms.loss.backward()?;
                bound.vars().iter().map(|v| g.wrt(*v)).collect::<Vec<Tensor>>()
            };
            let mut grads = grads;
            clip_grad_norm(&mut grads, cfg.grad_norm_clip);
            optimizer.step(params.tensors_mut(), &grads, adam, lr)?;
        }
    }
    stats.entropy = policy_entropy(params, graph)?;
    Ok(stats)
}

/// Entropy of the action distribution summed over joints.
pub fn policy_entropy(params: &NetParams, graph: &MorphologyGraph) -> Result<f64> {
    let idx = params
        .names()
        .iter()
        .position(|n| n == "policy.log_std")
        .expect("every network has a log_std tensor");
    let ls = params.tensors()[idx].data();
    let per_node: Vec<f64> = match params.config().output_head {
        crate::net::OutputHead::Shared => graph.nodes().iter().map(|s| ls[s.kind.index()]).collect(),
        crate::net::OutputHead::Separate { .. } => ls.to_vec(),
    };
    let mask = action_mask(graph, 1);
    let joints: Vec<f64> = per_node.iter().zip(&mask).filter(|(_, m)| **m != 0.0).map(|(s, _)| *s).collect();
    Ok(gaussian_entropy(&joints))
}

/// KL-driven learning-rate adjustment, clamped to `[1e-6, 1e-2]`.
pub fn adapt_lr(lr: f64, observed_kl: f64, cfg: &PpoConfig) -> f64 {
    let next = if observed_kl > 2.0 * cfg.kl_target {
        lr / 1.5
    } else if observed_kl < cfg.kl_target / 2.0 {
        lr * 1.5
    } else {
        lr
    };
    next.clamp(1e-6, 1e-2)
}
