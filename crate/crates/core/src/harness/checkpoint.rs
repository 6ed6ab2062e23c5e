//! Versioned plain-text checkpoints.
//!
//! Floats are written with 17 significant digits, which round-trips every
//! `f64` exactly, and sections always appear in the same order, so
//! save, load and save again reproduces the file byte for byte.

use std::fmt::Write as _;
use std::path::Path;

use super::config::{parse_config_str, RunConfig};
use super::{HarnessError, Result};
use crate::envs::{ChainState, EnvState, LqrState};
use crate::net::NetParams;
use crate::rng::Domain;
use crate::tensor::{AdamState, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "coordigraph-checkpoint";

/// Resumable state of one environment slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotSnapshot {
    pub reset_index: u64,
    pub noise_index: u64,
    pub episode_return: f64,
    pub state: EnvState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed training iterations.
    pub iteration: usize,
    pub env_steps: u64,
    pub lr: f64,
    pub shuffle_index: u64,
    pub params: NetParams,
    pub adam: AdamState,
    pub slots: Vec<SlotSnapshot>,
}

fn f(x: f64) -> String {
    format!("{x:.16e}")
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(|&x| f(x)).collect::<Vec<_>>().join(" ")
}

fn dims(shape: &[usize]) -> String {
    let mut s = shape.len().to_string();
    for d in shape {
        write!(s, " {d}").unwrap();
    }
    s
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let w = &mut out;
        writeln!(w, "{MAGIC} {CHECKPOINT_VERSION}").unwrap();
        writeln!(w, "iteration {}", self.iteration).unwrap();
        writeln!(w, "env_steps {}", self.env_steps).unwrap();
        writeln!(w, "lr {}", f(self.lr)).unwrap();
        writeln!(w, "rng philox4x32-10 seed {} shuffle_domain {} index {}", self.config.run.seed, Domain::Shuffle as u32, self.shuffle_index).unwrap();
        let echo = self.config.echo();
        writeln!(w, "config {}", echo.lines().count()).unwrap();
        w.push_str(&echo);
        let names = self.params.names();
        let tensors = self.params.tensors();
        writeln!(w, "tensors {}", tensors.len()).unwrap();
        for (name, t) in names.iter().zip(tensors) {
            writeln!(w, "tensor {name} {}", dims(t.shape())).unwrap();
            writeln!(w, "{}", join(t.data())).unwrap();
        }
        writeln!(w, "adam step {}", self.adam.step).unwrap();
        for (kind, moments) in [("m", &self.adam.m), ("v", &self.adam.v)] {
            for (name, t) in names.iter().zip(moments) {
                writeln!(w, "adam.{kind} {name} {}", dims(t.shape())).unwrap();
                writeln!(w, "{}", join(t.data())).unwrap();
            }
        }
        writeln!(w, "slots {}", self.slots.len()).unwrap();
        for (k, s) in self.slots.iter().enumerate() {
            write!(
                w,
                "slot {k} reset {} noise {} return {} ",
                s.reset_index,
                s.noise_index,
                f(s.episode_return)
            )
            .unwrap();
            match &s.state {
                EnvState::Chain(c) => writeln!(
                    w,
                    "chain t {} n {} theta {} omega {}",
                    c.t,
                    c.theta.len(),
                    join(&c.theta),
                    join(&c.omega)
                )
                .unwrap(),
                EnvState::Lqr(l) => writeln!(w, "lqr t {} x {}", l.t, f(l.x)).unwrap(),
            }
        }
        w.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut r = Reader {
            lines: text.lines().enumerate(),
        };
        let head = r.line()?;
        let mut parts = head.split_whitespace();
        if parts.next() != Some(MAGIC) {
            return Err(corrupt("missing checkpoint header"));
        }
        let version: u32 = parse_num(parts.next(), "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(HarnessError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let iteration = r.keyed("iteration")?;
        let env_steps = r.keyed("env_steps")?;
        let lr = r.keyed("lr")?;
        let rng_line = r.line()?;
        let shuffle_index = parse_num(rng_line.split_whitespace().last(), "shuffle index")?;

        let config_lines: usize = r.keyed("config")?;
        let mut echo = String::new();
        for _ in 0..config_lines {
            echo.push_str(r.line()?);
            echo.push('\n');
        }
        let config = parse_config_str(&echo)?;

        let count: usize = r.keyed("tensors")?;
        let mut named = Vec::with_capacity(count);
        for _ in 0..count {
            named.push(r.tensor("tensor")?);
        }
        let mut params = NetParams::init(config.net_config(), &mut crate::rng::RngStream::new(0, Domain::Init, 0));
        params.load_tensors(named).map_err(HarnessError::ShapeMismatch)?;

        let step_line = r.line()?;
        let step = parse_num(step_line.strip_prefix("adam step ").map(str::trim), "adam step")?;
        let mut adam = AdamState {
            step,
            m: Vec::with_capacity(count),
            v: Vec::with_capacity(count),
        };
        for kind in ["adam.m", "adam.v"] {
            for i in 0..count {
                let (name, t) = r.tensor(kind)?;
                let own = &params.tensors()[i];
                if name != params.names()[i] || t.shape() != own.shape() {
                    return Err(HarnessError::ShapeMismatch(format!(
                        "{kind} entry {name} {:?} does not match parameter {} {:?}",
                        t.shape(),
                        params.names()[i],
                        own.shape()
                    )));
                }
                if kind == "adam.m" {
                    adam.m.push(t);
                } else {
                    adam.v.push(t);
                }
            }
        }

        let slot_count: usize = r.keyed("slots")?;
        let mut slots = Vec::with_capacity(slot_count);
        for _ in 0..slot_count {
            slots.push(parse_slot(r.line()?)?);
        }
        if r.line()? != "end" {
            return Err(corrupt("missing end marker"));
        }
        Ok(Self {
            config,
            iteration,
            env_steps,
            lr,
            shuffle_index,
            params,
            adam,
            slots,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| HarnessError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_text(&text)
    }
}

fn corrupt(msg: &str) -> HarnessError {
    HarnessError::Checkpoint(msg.to_string())
}

fn parse_num<T: std::str::FromStr>(s: Option<&str>, what: &str) -> Result<T> {
    s.and_then(|x| x.parse().ok())
        .ok_or_else(|| corrupt(&format!("bad {what}")))
}

fn parse_floats(s: &str) -> Result<Vec<f64>> {
    s.split_whitespace()
        .map(|x| x.parse::<f64>().map_err(|_| corrupt(&format!("bad number {x:?}"))))
        .collect()
}

struct Reader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Reader<'a> {
    fn line(&mut self) -> Result<&'a str> {
        self.lines
            .next()
            .map(|(_, l)| l)
            .ok_or_else(|| corrupt("truncated checkpoint"))
    }

    fn keyed<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let line = self.line()?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(corrupt(&format!("expected `{key}`, found {line:?}")));
        }
        parse_num(parts.next(), key)
    }

    /// `<kind> <name> <rank> <dims...>` then one line of values.
    fn tensor(&mut self, kind: &str) -> Result<(String, Tensor)> {
        let header = self.line()?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(kind) {
            return Err(corrupt(&format!("expected `{kind}`, found {header:?}")));
        }
        let name = parts.next().ok_or_else(|| corrupt("tensor without a name"))?.to_string();
        let rank: usize = parse_num(parts.next(), "rank")?;
        let shape: Vec<usize> = (0..rank)
            .map(|_| parse_num(parts.next(), "dimension"))
            .collect::<Result<_>>()?;
        let data = parse_floats(self.line()?)?;
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(HarnessError::ShapeMismatch(format!(
                "{kind} {name}: shape {shape:?} needs {expected} values, found {}",
                data.len()
            )));
        }
        let t = Tensor::new(shape, data).map_err(|e| HarnessError::ShapeMismatch(e.to_string()))?;
        Ok((name, t))
    }
}

fn parse_slot(line: &str) -> Result<SlotSnapshot> {
    let p: Vec<&str> = line.split_whitespace().collect();
    let at = |i: usize, what: &str| p.get(i).copied().ok_or_else(|| corrupt(&format!("slot line missing {what}")));
    if at(0, "tag")? != "slot" || at(2, "reset")? != "reset" || at(4, "noise")? != "noise" || at(6, "return")? != "return" {
        return Err(corrupt(&format!("bad slot line {line:?}")));
    }
    let reset_index = parse_num(Some(at(3, "reset")?), "reset index")?;
    let noise_index = parse_num(Some(at(5, "noise")?), "noise index")?;
    let episode_return = parse_num(Some(at(7, "return")?), "episode return")?;
    let state = match at(8, "env")? {
        "chain" => {
            let t = parse_num(Some(at(10, "t")?), "t")?;
            let n: usize = parse_num(Some(at(12, "n")?), "n")?;
            if p.len() != 15 + 2 * n || p[13] != "theta" || p[14 + n] != "omega" {
                return Err(HarnessError::ShapeMismatch(format!("chain slot declares {n} links: {line:?}")));
            }
            let theta = parse_floats(&p[14..14 + n].join(" "))?;
            let omega = parse_floats(&p[15 + n..].join(" "))?;
            EnvState::Chain(ChainState { theta, omega, t })
        }
        "lqr" => EnvState::Lqr(LqrState {
            t: parse_num(Some(at(10, "t")?), "t")?,
            x: parse_num(Some(at(12, "x")?), "x")?,
        }),
        other => return Err(corrupt(&format!("unknown env {other:?}"))),
    };
    Ok(SlotSnapshot {
        reset_index,
        noise_index,
        episode_return,
        state,
    })
}
