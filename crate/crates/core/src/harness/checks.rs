use std::fmt;

use super::config::RunConfig;
use super::Result;
use crate::envs::{chain_observe, chain_step, ChainEnvConfig, ChainState, EnvKind};
use crate::morphology::MorphologyGraph;
use crate::net::{
    forward, forward_batch, random_observation, random_orthogonal, random_tilt, BoundParams, GravityFrame,
    NetConfig, NetParams,
};
use crate::ppo::{collect_rollout, compute_advantage, ppo_loss, ppo_loss_terms, EnvSlot};
use crate::rng::{Domain, RngStream};
use crate::tensor::Tape;

/// One measured quantity and the bound it is held to.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    /// `true` when the value has to exceed `limit` rather than stay below it.
    pub must_exceed: bool,
}

impl CheckLine {
    fn below(name: &str, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            value,
            limit,
            must_exceed: false,
        }
    }

    fn above(name: &str, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            value,
            limit,
            must_exceed: true,
        }
    }

    pub fn passed(&self) -> bool {
        if self.must_exceed {
            self.value > self.limit
        } else {
            self.value <= self.limit
        }
    }
}

impl fmt::Display for CheckLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = if self.must_exceed { ">" } else { "<=" };
        let verdict = if self.passed() { "ok" } else { "FAIL" };
        write!(f, "{:<40} {:.3e} (need {op} {:.1e}) {verdict}", self.name, self.value, self.limit)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub lines: Vec<CheckLine>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(CheckLine::passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckLine> {
        self.lines.iter().find(|l| l.name == name)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.lines {
            writeln!(f, "{l}")?;
        }
        Ok(())
    }
}

fn graph_for(cfg: &RunConfig) -> Result<MorphologyGraph> {
    Ok(cfg.env_kind().morphology(cfg.root_skip)?)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Three-dimensional group-action test on synthetic observations.
///
/// For each of `inputs` draws (fresh parameters and observation) the network
/// is evaluated on the observation and on its image under `maps` random
/// gravity-fixing orthogonal maps in one batch. Scalars and values must not
/// move and `mu` must rotate along. A random tilt of gravity is also applied
/// per draw; its largest effect is reported and must be clearly nonzero.
pub fn subequivariance_suite(cfg: &RunConfig, inputs: usize, maps: usize, tol: f64) -> Result<Vec<CheckLine>> {
    let graph = graph_for(cfg)?;
    let net = NetConfig {
        dim: 3,
        ..cfg.net_config()
    };
    let frame = GravityFrame::down(3);
    let g = frame.g_hat().to_vec();
    let n = graph.node_count();
    let h = net.hidden;
    let seed = cfg.run.seed;
    let (mut dh, mut dv, mut dmu, mut tilt) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for k in 0..inputs {
        let params = NetParams::init(net.clone(), &mut RngStream::new(seed, Domain::Check, 3 * k as u32));
        let mut rng = RngStream::new(seed, Domain::Check, 3 * k as u32 + 1);
        let obs = random_observation(3, n, &mut rng);
        let mut os: Vec<Vec<f64>> = (0..maps).map(|_| random_orthogonal(&g, &mut rng)).collect();
        os.push(random_tilt(&g, &mut rng));
        let mut batch = vec![obs.clone()];
        batch.extend(os.iter().map(|o| obs.transformed(o)));
        let out = forward_batch(&params, &graph, &frame, &batch)?;
        let hid = out.hidden.data();
        let mu = out.mu_vec.data();
        let base_h = &hid[..n * h];
        for (b, o) in os.iter().enumerate().map(|(i, o)| (i + 1, o)) {
            let hb = &hid[b * n * h..(b + 1) * n * h];
            let dvb = (out.value[b] - out.value[0]).abs();
            let dhb = max_diff(base_h, hb);
            let mut dmub: f64 = 0.0;
            for v in 0..n {
                let src = &mu[v * 3..v * 3 + 3];
                let dst = &mu[(b * n + v) * 3..(b * n + v) * 3 + 3];
                for i in 0..3 {
                    let expect: f64 = (0..3).map(|j| o[i * 3 + j] * src[j]).sum();
                    dmub = dmub.max((expect - dst[i]).abs());
                }
            }
            if b <= maps {
                dh = dh.max(dhb);
                dv = dv.max(dvb);
                dmu = dmu.max(dmub);
            } else {
                tilt = tilt.max(dhb.max(dvb).max(dmub));
            }
        }
    }
    let mut lines = vec![
        CheckLine::below("d3 scalar channels", dh, tol),
        CheckLine::below("d3 value", dv, tol),
        CheckLine::below("d3 mu equivariance", dmu, tol),
    ];
    if inputs > 0 {
        lines.push(CheckLine::above("d3 gravity tilt breaks invariance", tilt, 1e-3));
    }
    Ok(lines)
}

fn random_chain_state(n: usize, rng: &mut RngStream) -> ChainState {
    ChainState {
        theta: (0..n).map(|_| rng.uniform_range(-std::f64::consts::PI, std::f64::consts::PI)).collect(),
        omega: (0..n).map(|_| 2.0 * rng.normal()).collect(),
        t: 0,
    }
}

/// Planar mirror test through the real chain pipeline.
///
/// Each draw takes fresh parameters, a random chain state and random
/// torques. The policy's mean torques on the mirrored state must be the
/// negated torques on the original, and stepping the mirrored state with
/// negated torques must land on the mirror of the original step.
/// Translating all positions must leave every output unchanged.
pub fn reflection_suite(cfg: &RunConfig, draws: usize, tol: f64) -> Result<Vec<CheckLine>> {
    let chain = match cfg.env_kind() {
        EnvKind::Chain(c) => c,
        EnvKind::Lqr(_) => ChainEnvConfig::default(),
    };
    let graph = MorphologyGraph::chain(chain.n_links, chain.link_length, chain.link_mass, cfg.root_skip)
        .map_err(crate::envs::EnvError::from)?;
    let mut net = cfg.net_config();
    net.dim = 2;
    if let crate::net::OutputHead::Separate { .. } = net.output_head {
        net.output_head = crate::net::OutputHead::Separate {
            nodes: graph.node_count(),
        };
    }
    let frame = GravityFrame::down(2);
    let n = chain.n_links;
    let seed = cfg.run.seed;
    let (mut dtau, mut dstep, mut dtrans) = (0.0f64, 0.0f64, 0.0f64);
    for k in 0..draws {
        let params = NetParams::init(net.clone(), &mut RngStream::new(seed, Domain::Check, 1_000_000 + 2 * k as u32));
        let mut rng = RngStream::new(seed, Domain::Check, 1_000_001 + 2 * k as u32);
        let s = random_chain_state(n, &mut rng);
        let obs = chain_observe(&s, &graph, &chain)?;
        let mirrored = chain_observe(&s.reflect(), &graph, &chain)?;
        let out = forward_batch(&params, &graph, &frame, &[obs.clone(), mirrored])?;
        let tau = out.action_mean.expect("planar network");
        let m = graph.node_count();
        for v in 1..m {
            dtau = dtau.max((tau[v] + tau[m + v]).abs());
        }

        let offset = [3.0 * rng.normal(), 3.0 * rng.normal()];
        let moved = forward(&params, &graph, &frame, &obs.translated(&offset))?;
        let dh = max_diff(out.hidden.data(), moved.hidden.data());
        let dmu = max_diff(&out.mu_vec.data()[..2 * m], moved.mu_vec.data());
        dtrans = dtrans.max(dh.max(dmu).max((out.value[0] - moved.value[0]).abs()));

        let mut a = vec![0.0; n + 1];
        for x in &mut a[1..] {
            *x = chain.torque_limit * rng.uniform_range(-1.2, 1.2);
        }
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        let direct = chain_step(&s, &a, &chain)?;
        let flipped = chain_step(&s.reflect(), &neg, &chain)?;
        let want = direct.state.reflect();
        dstep = dstep
            .max(max_diff(&want.theta, &flipped.state.theta))
            .max(max_diff(&want.omega, &flipped.state.omega))
            .max((direct.reward - flipped.reward).abs());
    }
    Ok(vec![
        CheckLine::below("d2 torque sign flip", dtau, tol),
        CheckLine::below("d2 env step commutes with mirror", dstep, 1e-12),
        CheckLine::below("d2 translation invariance", dtrans, 1e-12),
    ])
}

/// Trial counts: `trials` drives both the number of d=3 inputs and the
/// number of planar draws (ten per trial), with twenty maps per input.
pub fn check_equivariance(cfg: &RunConfig, trials: usize, tol: f64) -> Result<Report> {
    if trials == 0 {
        return Ok(Report::default());
    }
    let mut lines = subequivariance_suite(cfg, trials, 20, tol)?;
    lines.extend(reflection_suite(cfg, 10 * trials, tol)?);
    Ok(Report { lines })
}

/// Worst relative error per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub entries: Vec<(String, f64)>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.1).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.1 <= self.tolerance)
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, err) in &self.entries {
            writeln!(f, "{name:<24} {err:.3e}")?;
        }
        write!(f, "worst relative error {:.3e} (tolerance {:.1e})", self.worst(), self.tolerance)
    }
}

/// Finite-difference step.
const FD_STEP: f64 = 1e-6;
/// Entries compared per tensor: the largest gradient plus random picks.
const FD_SAMPLES: usize = 4;
/// Gradients below this are compared in absolute terms.
const FD_FLOOR: f64 = 1e-5;

/// Central-difference check of the full PPO loss with respect to every
/// parameter tensor.
///
/// A short rollout is collected with freshly initialised parameters, which
/// are then nudged so the ratio and KL terms are not at their trivial
/// values.
pub fn grad_check(cfg: &RunConfig, tol: f64) -> Result<GradReport> {
    let seed = cfg.run.seed;
    let kind = cfg.env_kind();
    let net = cfg.net_config();
    let frame = GravityFrame::down(2);
    let mut params = NetParams::init(net, &mut RngStream::new(seed, Domain::Check, 0));
    let mut slots = (0..2)
        .map(|k| EnvSlot::in_domain(kind.clone(), cfg.root_skip, seed, 10 + k, Domain::Check))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let graph = slots[0].env.graph().clone();
    let batch = collect_rollout(&mut slots, &params, &frame, 6, 1, false)?;
    let adv = compute_advantage(&batch, cfg.ppo.gamma, cfg.ppo.lam, cfg.ppo.normalize_adv);

    let mut nudge = RngStream::new(seed, Domain::Check, 1);
    for t in params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x += 1e-3 * nudge.normal());
    }

    let tape = Tape::new();
    let bound = BoundParams::new(&tape, &params, true);
    let idx: Vec<usize> = (0..batch.len()).collect();
    let terms = ppo_loss_terms(&tape, &params, &bound, &graph, &frame, &batch, &adv, &idx, &cfg.ppo)?;
    let grads = terms.loss.backward().map_err(crate::ppo::PpoError::from)?;
    let analytic: Vec<Vec<f64>> = bound.vars().iter().map(|v| grads.wrt(*v).into_data()).collect();
    drop(bound);

    let mut pick = RngStream::new(seed, Domain::Check, 2);
    let mut entries = Vec::with_capacity(analytic.len());
    for (i, g) in analytic.iter().enumerate() {
        let mut chosen = vec![g
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(j, _)| j)
            .unwrap_or(0)];
        for _ in 1..FD_SAMPLES.min(g.len()) {
            chosen.push(pick.below(g.len()));
        }
        let mut worst: f64 = 0.0;
        for j in chosen {
            let orig = params.tensors()[i].data()[j];
            params.tensors_mut()[i].data_mut()[j] = orig + FD_STEP;
            let up = ppo_loss(&params, &graph, &frame, &batch, &adv, &cfg.ppo)?;
            params.tensors_mut()[i].data_mut()[j] = orig - FD_STEP;
            let down = ppo_loss(&params, &graph, &frame, &batch, &adv, &cfg.ppo)?;
            params.tensors_mut()[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let scale = g[j].abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max((g[j] - numeric).abs() / scale);
        }
        entries.push((params.names()[i].clone(), worst));
    }
    Ok(GradReport { entries, tolerance: tol })
}
