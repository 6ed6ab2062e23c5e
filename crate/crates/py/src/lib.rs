//! Python bindings: configuration, the network forward pass, the chain and
//! LQR environments, training, evaluation and the verification commands.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use coordigraph::envs::{lqr_optimal_gain, Env, EnvKind, EnvState, Observation};
use coordigraph::harness::{self, Checkpoint, HarnessError, MetricsRow, RunConfig};
use coordigraph::net::{forward, GravityFrame, NetParams};
use coordigraph::rng::{Domain, RngStream};

fn err(e: impl Into<HarnessError>) -> PyErr {
    let e = e.into();
    match e {
        HarnessError::NonFinite { .. } | HarnessError::Io { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Run configuration; keys use the dotted `section.key` names of config files.
#[pyclass(name = "Config")]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text = None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        let inner = match text {
            Some(t) => harness::parse_config_str(t).map_err(err)?,
            None => RunConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: harness::parse_config(&path).map_err(err)?,
        })
    }

    /// Sets one key; the whole configuration is re-validated.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner = harness::apply_overrides(self.inner.clone(), &[format!("--{key}={value}")]).map_err(err)?;
        Ok(())
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .get(key)
            .ok_or_else(|| PyValueError::new_err(format!("unknown key {key:?}")))
    }

    #[staticmethod]
    fn keys() -> Vec<&'static str> {
        harness::KEYS.to_vec()
    }

    fn echo(&self) -> String {
        self.inner.echo()
    }

    fn __repr__(&self) -> String {
        format!("Config(<{} keys>)", harness::KEYS.len())
    }
}

fn observation(dim: usize, positions: Vec<f64>, directions: Vec<f64>, velocities: Vec<f64>, spins: Vec<f64>) -> PyResult<Observation> {
    let n = spins.len();
    if [&positions, &directions, &velocities].iter().any(|v| v.len() != n * dim) {
        return Err(PyValueError::new_err(format!(
            "expected {n} nodes x {dim} entries for positions, directions and velocities"
        )));
    }
    Ok(Observation {
        dim,
        positions,
        directions,
        velocities,
        spins,
    })
}

/// Network parameters initialised from a configuration's seed.
#[pyclass(name = "Network")]
struct PyNetwork {
    params: NetParams,
    config: RunConfig,
}

#[pymethods]
impl PyNetwork {
    #[new]
    fn new(config: &PyConfig) -> Self {
        let cfg = config.inner.clone();
        let params = NetParams::init(cfg.net_config(), &mut RngStream::new(cfg.run.seed, Domain::Init, 0));
        Self { params, config: cfg }
    }

    #[staticmethod]
    fn from_checkpoint(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(err)?;
        Ok(Self {
            params: ck.params,
            config: ck.config,
        })
    }

    fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.params.names().to_vec()
    }

    /// Forward pass on a chain of `n_links` links. Vector inputs are flat,
    /// node-major lists of planar coordinates. Returns a dict with `mu_vec`,
    /// `log_std`, `value` and `torque`.
    #[pyo3(signature = (positions, directions, velocities, spins, n_links = None))]
    fn forward(
        &self,
        positions: Vec<f64>,
        directions: Vec<f64>,
        velocities: Vec<f64>,
        spins: Vec<f64>,
        n_links: Option<usize>,
    ) -> PyResult<HashMap<String, Vec<f64>>> {
        let mut kind = self.config.env_kind();
        if let (Some(n), EnvKind::Chain(c)) = (n_links, &mut kind) {
            c.n_links = n;
        }
        let graph = kind.morphology(self.config.root_skip).map_err(err)?;
        let obs = observation(2, positions, directions, velocities, spins)?;
        let out = forward(&self.params, &graph, &GravityFrame::down(2), &obs).map_err(err)?;
        let mut m = HashMap::new();
        m.insert("mu_vec".into(), out.mu_vec.into_data());
        m.insert("log_std".into(), out.log_std);
        m.insert("value".into(), out.value);
        m.insert("torque".into(), out.action_mean.unwrap_or_default());
        Ok(m)
    }
}

/// One environment instance (chain or LQR, per the configuration).
#[pyclass(name = "Env")]
struct PyEnv {
    env: Env,
    rng: RngStream,
}

#[pymethods]
impl PyEnv {
    #[new]
    #[pyo3(signature = (config, slot = 0))]
    fn new(config: &PyConfig, slot: u32) -> PyResult<Self> {
        let cfg = &config.inner;
        let mut rng = RngStream::new(cfg.run.seed, Domain::Env, 2 * slot);
        let env = Env::new(cfg.env_kind(), cfg.root_skip, &mut rng).map_err(err)?;
        Ok(Self { env, rng })
    }

    fn reset(&mut self) {
        self.env.reset(&mut self.rng);
    }

    fn node_count(&self) -> usize {
        self.env.graph().node_count()
    }

    /// `(positions, directions, velocities, spins)` as flat lists.
    fn observe(&self) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
        let o = self.env.observe().map_err(err)?;
        Ok((o.positions, o.directions, o.velocities, o.spins))
    }

    /// Node-indexed actions (the root entry is ignored); returns `(reward, done)`.
    fn step(&mut self, actions: Vec<f64>) -> PyResult<(f64, bool)> {
        self.env.step(&actions).map_err(err)
    }

    /// Chain: `{"theta", "omega"}`; LQR: `{"x"}`.
    fn state(&self) -> HashMap<String, Vec<f64>> {
        let mut m = HashMap::new();
        match self.env.state() {
            EnvState::Chain(s) => {
                m.insert("theta".into(), s.theta.clone());
                m.insert("omega".into(), s.omega.clone());
            }
            EnvState::Lqr(s) => {
                m.insert("x".into(), vec![s.x]);
            }
        }
        m
    }
}

fn row_dict(r: &MetricsRow) -> HashMap<&'static str, f64> {
    HashMap::from([
        ("iteration", r.iteration as f64),
        ("env_steps", r.env_steps as f64),
        ("mean_return", r.mean_return),
        ("std_return", r.std_return),
        ("kl", r.kl),
        ("clip_frac", r.clip_frac),
        ("value_loss", r.value_loss),
        ("entropy", r.entropy),
        ("lr", r.lr),
        ("wall_clock_seconds", r.wall_clock_seconds),
    ])
}

/// Trains into `run.output_dir`; returns the metrics rows of this call.
#[pyfunction]
#[pyo3(signature = (config, resume = None))]
fn train(py: Python<'_>, config: &PyConfig, resume: Option<PathBuf>) -> PyResult<Vec<HashMap<&'static str, f64>>> {
    let cfg = config.inner.clone();
    let summary = py
        .detach(|| harness::train(&cfg, resume.as_deref()))
        .map_err(err)?;
    Ok(summary.rows.iter().map(row_dict).collect())
}

/// Deterministic evaluation of a checkpoint; returns `(mean, std, returns)`.
#[pyfunction]
#[pyo3(signature = (checkpoint, episodes = 20, seed = 0, n_links = None))]
fn evaluate(checkpoint: PathBuf, episodes: usize, seed: u64, n_links: Option<usize>) -> PyResult<(f64, f64, Vec<f64>)> {
    let ck = Checkpoint::load(&checkpoint).map_err(err)?;
    let r = harness::evaluate(&ck, episodes, seed, n_links, None).map_err(err)?;
    Ok((r.mean_return, r.std_return, r.returns))
}

/// Returns `(passed, [(name, value, limit, must_exceed), ...])`.
#[pyfunction]
#[pyo3(signature = (config, trials = 100, tolerance = 1e-8))]
#[allow(clippy::type_complexity)]
fn check_equivariance(config: &PyConfig, trials: usize, tolerance: f64) -> PyResult<(bool, Vec<(String, f64, f64, bool)>)> {
    let r = harness::check_equivariance(&config.inner, trials, tolerance).map_err(err)?;
    Ok((
        r.passed(),
        r.lines.into_iter().map(|l| (l.name, l.value, l.limit, l.must_exceed)).collect(),
    ))
}

/// Returns `(passed, worst, [(tensor, relative_error), ...])`.
#[pyfunction]
#[pyo3(signature = (config, tolerance = 1e-4))]
fn grad_check(config: &PyConfig, tolerance: f64) -> PyResult<(bool, f64, Vec<(String, f64)>)> {
    let r = harness::grad_check(&config.inner, tolerance).map_err(err)?;
    Ok((r.passed(), r.worst(), r.entries))
}

#[pyfunction(name = "lqr_optimal_gain")]
fn optimal_gain(config: &PyConfig) -> f64 {
    lqr_optimal_gain(&config.inner.lqr)
}

#[pymodule(name = "coordigraph")]
fn coordigraph_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyEnv>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(check_equivariance, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(optimal_gain, m)?)?;
    Ok(())
}
