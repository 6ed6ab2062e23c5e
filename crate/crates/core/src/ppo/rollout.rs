use super::{PpoError, Result};
use crate::envs::{Env, EnvKind, Observation};
use crate::morphology::NodeKind;
use crate::net::{forward_batch, gaussian_log_prob, GravityFrame, NetParams};
use crate::rng::{Domain, RngStream};

/// One environment instance with its own reset and action-noise streams.
///
/// Slot `k` draws resets from stream `2k` and action noise from stream
/// `2k + 1` of the env domain, so a slot's trajectory does not depend on
/// which worker steps it.
#[derive(Debug, Clone)]
pub struct EnvSlot {
    pub env: Env,
    pub reset_rng: RngStream,
    pub noise_rng: RngStream,
    /// Return accumulated by the episode in progress.
    pub episode_return: f64,
}

impl EnvSlot {
    pub fn new(kind: EnvKind, root_skip: bool, seed: u64, slot: u32) -> Result<Self> {
        Self::in_domain(kind, root_skip, seed, slot, Domain::Env)
    }

    /// Same layout on another domain; evaluation uses [`Domain::Eval`] so its
    /// episodes never reuse training draws.
    pub fn in_domain(kind: EnvKind, root_skip: bool, seed: u64, slot: u32, domain: Domain) -> Result<Self> {
        let mut reset_rng = RngStream::new(seed, domain, 2 * slot);
        let env = Env::new(kind, root_skip, &mut reset_rng)?;
        Ok(Self {
            env,
            reset_rng,
            noise_rng: RngStream::new(seed, domain, 2 * slot + 1),
            episode_return: 0.0,
        })
    }
}

/// Builds `count` slots for one run.
pub fn make_slots(kind: &EnvKind, root_skip: bool, seed: u64, count: usize) -> Result<Vec<EnvSlot>> {
    (0..count)
        .map(|k| EnvSlot::new(kind.clone(), root_skip, seed, k as u32))
        .collect()
}

/// A contiguous run of transitions from one slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    /// Value estimate of the state after the last transition, used when the
    /// segment stops mid-episode.
    pub bootstrap: f64,
}

/// Transitions stored slot by slot, each slot's steps in time order.
///
/// Per-node arrays (`actions`, `means`, `log_stds`) hold `nodes` entries per
/// transition; the root's action is always zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBatch {
    pub nodes: usize,
    pub observations: Vec<Observation>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub values: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub means: Vec<f64>,
    pub log_stds: Vec<f64>,
    /// Empty means one segment covering everything with a zero bootstrap.
    pub segments: Vec<Segment>,
    /// Returns of episodes that finished while collecting.
    pub episode_returns: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub(crate) fn segment_list(&self) -> Vec<Segment> {
        if self.segments.is_empty() {
            vec![Segment {
                start: 0,
                len: self.len(),
                bootstrap: 0.0,
            }]
        } else {
            self.segments.clone()
        }
    }

    fn append(&mut self, other: RolloutBatch) {
        let offset = self.len();
        self.nodes = other.nodes;
        self.observations.extend(other.observations);
        self.actions.extend(other.actions);
        self.rewards.extend(other.rewards);
        self.dones.extend(other.dones);
        self.values.extend(other.values);
        self.log_probs.extend(other.log_probs);
        self.means.extend(other.means);
        self.log_stds.extend(other.log_stds);
        self.segments.extend(other.segments.into_iter().map(|s| Segment {
            start: s.start + offset,
            ..s
        }));
        self.episode_returns.extend(other.episode_returns);
    }
}

/// Steps every slot in `slots` `steps` times with one batched forward pass per
/// step. Returns one sub-batch per slot.
fn run_group(
    slots: &mut [EnvSlot],
    params: &NetParams,
    frame: &GravityFrame,
    steps: usize,
    deterministic: bool,
) -> Result<Vec<RolloutBatch>> {
    if slots.is_empty() {
        return Ok(Vec::new());
    }
    let graph = slots[0].env.graph().clone();
    let n = graph.node_count();
    let joints: Vec<bool> = graph.nodes().iter().map(|s| s.kind != NodeKind::Root).collect();
    let mut out: Vec<RolloutBatch> = slots
        .iter()
        .map(|_| RolloutBatch {
            nodes: n,
            ..Default::default()
        })
        .collect();
    for _ in 0..steps {
        let obs: Vec<Observation> = slots
            .iter()
            .map(|s| s.env.observe())
            .collect::<std::result::Result<_, _>>()?;
        let pol = forward_batch(params, &graph, frame, &obs)?;
        let mean = pol.action_mean.ok_or(PpoError::NotPlanar)?;
        for (b, (slot, o)) in slots.iter_mut().zip(obs).enumerate() {
            let mu = &mean[b * n..(b + 1) * n];
            let ls = &pol.log_std[b * n..(b + 1) * n];
            let mut action = vec![0.0; n];
            let mut lp = 0.0;
            for v in 0..n {
                if !joints[v] {
                    continue;
                }
                let eps = if deterministic { 0.0 } else { slot.noise_rng.normal() };
                action[v] = mu[v] + ls[v].exp() * eps;
                lp += gaussian_log_prob(&action[v..=v], &mu[v..=v], &ls[v..=v]);
            }
            let (reward, done) = slot.env.step(&action)?;
            slot.episode_return += reward;
            let rec = &mut out[b];
            rec.observations.push(o);
            rec.actions.extend_from_slice(&action);
            rec.rewards.push(reward);
            rec.dones.push(done);
            rec.values.push(pol.value[b]);
            rec.log_probs.push(lp);
            rec.means.extend_from_slice(mu);
            rec.log_stds.extend_from_slice(ls);
            if done {
                rec.episode_returns.push(slot.episode_return);
                slot.episode_return = 0.0;
                slot.env.reset(&mut slot.reset_rng);
            }
        }
    }
    // Bootstrap values for the states the slots stopped in.
    let obs: Vec<Observation> = slots
        .iter()
        .map(|s| s.env.observe())
        .collect::<std::result::Result<_, _>>()?;
    let last = forward_batch(params, &graph, frame, &obs)?;
    for (b, rec) in out.iter_mut().enumerate() {
        rec.segments.push(Segment {
            start: 0,
            len: steps,
            bootstrap: last.value[b],
        });
    }
    Ok(out)
}

/// Collects `steps_per_slot` transitions from every slot.
///
/// Slots are split into `workers` contiguous groups stepped on separate
/// threads. Each slot owns its random streams and batching does not change
/// per-row results, so the assembled batch is identical for any worker count.
pub fn collect_rollout(
    slots: &mut [EnvSlot],
    params: &NetParams,
    frame: &GravityFrame,
    steps_per_slot: usize,
    workers: usize,
    deterministic: bool,
) -> Result<RolloutBatch> {
    if steps_per_slot == 0 {
        return Err(PpoError::Config("steps per slot must be at least 1".into()));
    }
    let workers = workers.clamp(1, slots.len().max(1));
    let per = slots.len().div_ceil(workers);
    let groups: Vec<Result<Vec<RolloutBatch>>> = if workers == 1 {
        vec![run_group(slots, params, frame, steps_per_slot, deterministic)]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = slots
                .chunks_mut(per)
                .map(|chunk| scope.spawn(move || run_group(chunk, params, frame, steps_per_slot, deterministic)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("rollout worker panicked"))
                .collect()
        })
    };
    let mut batch = RolloutBatch::default();
    for group in groups {
        for part in group? {
            batch.append(part);
        }
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::ChainEnvConfig;
    use crate::net::{forward, log_prob, NetConfig};

    fn small_params(seed: u64) -> NetParams {
        NetParams::init(
            NetConfig {
                hidden: 6,
                message_hidden: 5,
                propagation_steps: 2,
                ..Default::default()
            },
            &mut RngStream::new(seed, Domain::Init, 0),
        )
    }

    fn chain_kind() -> EnvKind {
        EnvKind::Chain(ChainEnvConfig {
            horizon: 7,
            ..Default::default()
        })
    }

    #[test]
    fn rollout_is_identical_across_worker_counts() {
        let p = small_params(0);
        let frame = GravityFrame::down(2);
        let run = |workers| {
            let mut slots = make_slots(&chain_kind(), false, 3, 5).unwrap();
            let a = collect_rollout(&mut slots, &p, &frame, 9, workers, false).unwrap();
            let b = collect_rollout(&mut slots, &p, &frame, 9, workers, false).unwrap();
            (a, b)
        };
        let one = run(1);
        assert_eq!(one, run(2));
        assert_eq!(one, run(4));
        assert_eq!(one.0.len(), 45);
        assert_eq!(one.0.segments.len(), 5);
        assert_eq!(one.0.episode_returns.len(), 5);
    }

    #[test]
    fn recorded_log_probs_match_recomputation() {
        let p = small_params(1);
        let frame = GravityFrame::down(2);
        let mut slots = make_slots(&chain_kind(), false, 4, 2).unwrap();
        let batch = collect_rollout(&mut slots, &p, &frame, 6, 1, false).unwrap();
        let graph = slots[0].env.graph().clone();
        let n = batch.nodes;
        for t in 0..batch.len() {
            let out = forward(&p, &graph, &frame, &batch.observations[t]).unwrap();
            let lp = log_prob(&out, &graph, &batch.actions[t * n..(t + 1) * n]).unwrap();
            assert!((lp - batch.log_probs[t]).abs() < 1e-12);
            assert_eq!(batch.actions[t * n], 0.0);
        }
    }

    #[test]
    fn vanishing_std_gives_mean_actions() {
        let mut p = small_params(2);
        let idx = p.names().iter().position(|n| n == "policy.log_std").unwrap();
        p.tensors_mut()[idx].data_mut().iter_mut().for_each(|x| *x = -20.0);
        let frame = GravityFrame::down(2);
        let mut slots = make_slots(&chain_kind(), false, 5, 1).unwrap();
        let batch = collect_rollout(&mut slots, &p, &frame, 5, 1, false).unwrap();
        for (a, m) in batch.actions.iter().zip(&batch.means).skip(1) {
            if *a != 0.0 {
                assert!((a - m).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn zero_steps_is_rejected() {
        let p = small_params(3);
        let mut slots = make_slots(&chain_kind(), false, 5, 1).unwrap();
        assert!(collect_rollout(&mut slots, &p, &GravityFrame::down(2), 0, 1, false).is_err());
    }
}
