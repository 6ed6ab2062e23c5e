//! Gravity-aware subequivariant message passing over a morphology graph.
//!
//! Every node carries invariant scalar channels `H` (n x h) and vector
//! channels `Z` (n x d x c). A message along `j -> i` stacks
//! `V = [Z_i | Z_j | g]` and feeds the invariant Gram block `V^T V`, the two
//! scalar states and both shape descriptors into one MLP, which returns a
//! scalar message and a mixing matrix `M`; the vector message is `V M`.
//! Appending the gravity direction `g` as an extra column makes every layer
//! equivariant exactly under orthogonal maps that fix `g`.
//!
//! All parameters are shared across nodes, so a model trained on one chain
//! length runs unchanged on another.

mod forward;
mod group;
mod policy;

pub use forward::{
    aggregate, center_vectors, encode, forward, forward_batch, forward_vars, layer_update, message,
    random_observation, symmetry_deviation, BoundParams,
    ForwardVars, GraphBatch, NodeVars, PolicyOutput,
};
pub use group::{gravity_fixing_map, random_orthogonal, random_tilt, rotation_about};
pub use policy::{
    action_mask, gaussian_kl_var, log_prob,
    gaussian_entropy, gaussian_kl, gaussian_log_prob, log_prob_var, torque_means, torque_readout,
};

use thiserror::Error;

use crate::morphology::{MorphologyGraph, ShapeDescriptor};
use crate::rng::RngStream;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("observation layout mismatch: {0}")]
    Layout(String),
    #[error("gravity direction must be a unit vector, got norm {0}")]
    GravityNorm(f64),
    #[error("torque readout needs planar vectors, got dimension {0}")]
    NotPlanar(usize),
    #[error("separate output heads were built for {built} nodes, graph has {found}")]
    HeadMismatch { built: usize, found: usize },
}

pub type Result<T> = std::result::Result<T, NetError>;

/// Unit vector along gravity.
#[derive(Debug, Clone, PartialEq)]
pub struct GravityFrame {
    g_hat: Vec<f64>,
}

impl GravityFrame {
    pub fn new(g_hat: Vec<f64>) -> Result<Self> {
        let norm = g_hat.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(NetError::GravityNorm(norm));
        }
        Ok(Self { g_hat })
    }

    /// `(0, -1)` in the plane, `(0, 0, -1)` in space.
    pub fn down(dim: usize) -> Self {
        let mut g_hat = vec![0.0; dim];
        g_hat[dim - 1] = -1.0;
        Self { g_hat }
    }

    pub fn g_hat(&self) -> &[f64] {
        &self.g_hat
    }

    pub fn dim(&self) -> usize {
        self.g_hat.len()
    }
}

/// How per-node action distributions are parameterized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputHead {
    /// One head and one `log_std` per node kind, shared by all nodes.
    Shared,
    /// Per-node head weights and `log_std`; ties the model to one morphology.
    Separate { nodes: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub dim: usize,
    pub hidden: usize,
    pub vector_channels: usize,
    pub propagation_steps: usize,
    pub message_hidden: usize,
    pub output_head: OutputHead,
    /// `false` selects the plain-graph ablation: vector channels are
    /// flattened into raw coordinates and fed to the MLPs as scalars.
    pub subequivariant: bool,
    pub zero_directions: bool,
    pub init_log_std: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            hidden: 256,
            vector_channels: 3,
            propagation_steps: 6,
            message_hidden: 64,
            output_head: OutputHead::Shared,
            subequivariant: true,
            zero_directions: false,
            init_log_std: -0.5,
        }
    }
}

/// Observed vector inputs per node: centered position, direction, velocity.
pub const INPUT_VECTORS: usize = 3;

impl NetConfig {
    /// Columns of the message stack `[Z_i | Z_j | g]`.
    pub fn stack_width(&self) -> usize {
        2 * self.vector_channels + 1
    }

    fn embed_inputs(&self) -> usize {
        let base = 1 + ShapeDescriptor::FEATURES;
        if self.subequivariant {
            base
        } else {
            base + INPUT_VECTORS * self.dim
        }
    }

    fn message_inputs(&self) -> usize {
        let k = self.stack_width();
        let geometric = if self.subequivariant {
            k * (k + 1) / 2
        } else {
            self.dim * k
        };
        2 * self.hidden + 2 * ShapeDescriptor::FEATURES + geometric
    }

    fn value_inputs(&self) -> usize {
        let c = self.vector_channels;
        if self.subequivariant {
            self.hidden + 2 * c
        } else {
            self.hidden + self.dim * c
        }
    }
}

/// Indices of each tensor inside [`NetParams`].
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerIdx {
    pub msg_w1: usize,
    pub msg_b1: usize,
    pub msg_ws: usize,
    pub msg_bs: usize,
    pub msg_wm: usize,
    pub msg_bm: usize,
    pub self_w0: usize,
    pub update_w: usize,
    pub update_b: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub embed_w: usize,
    pub embed_b: usize,
    pub embed_mix: usize,
    pub layers: Vec<LayerIdx>,
    pub policy_w: usize,
    pub policy_b: usize,
    pub log_std: usize,
    pub value_w1: usize,
    pub value_b1: usize,
    pub value_w2: usize,
    pub value_b2: usize,
}

/// Named parameter tensors plus the configuration that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    config: NetConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    layout: Layout,
}

struct Builder<'a> {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    rng: &'a mut RngStream,
}

impl Builder<'_> {
    /// Gaussian weights with std `gain / sqrt(fan_in)`.
    fn weight(&mut self, name: String, shape: &[usize], fan_in: usize, gain: f64) -> usize {
        let scale = gain / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| scale * self.rng.normal()).collect();
        self.push(name, Tensor::new(shape.to_vec(), data).expect("shape and data agree"))
    }

    fn filled(&mut self, name: String, shape: &[usize], value: f64) -> usize {
        self.push(name, Tensor::filled(shape, value))
    }

    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }
}

impl NetParams {
    /// Deterministic initialization from `rng`.
    pub fn init(config: NetConfig, rng: &mut RngStream) -> Self {
        let h = config.hidden;
        let c = config.vector_channels;
        let mh = config.message_hidden;
        let k = config.stack_width();
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            rng,
        };

        let embed_in = config.embed_inputs();
        let embed_w = b.weight("embed.w".into(), &[embed_in, h], embed_in, 1.0);
        let embed_b = b.filled("embed.b".into(), &[h], 0.0);
        let embed_mix = b.weight("embed.mix".into(), &[INPUT_VECTORS, c], INPUT_VECTORS, 1.0);

        let msg_in = config.message_inputs();
        let layers = (0..config.propagation_steps)
            .map(|l| LayerIdx {
                msg_w1: b.weight(format!("layer{l}.msg.w1"), &[msg_in, mh], msg_in, 1.0),
                msg_b1: b.filled(format!("layer{l}.msg.b1"), &[mh], 0.0),
                msg_ws: b.weight(format!("layer{l}.msg.ws"), &[mh, h], mh, 1.0),
                msg_bs: b.filled(format!("layer{l}.msg.bs"), &[h], 0.0),
                msg_wm: b.weight(format!("layer{l}.msg.wm"), &[mh, k * c], mh, 0.3),
                msg_bm: b.filled(format!("layer{l}.msg.bm"), &[k * c], 0.0),
                self_w0: b.weight(format!("layer{l}.self.w0"), &[h, h], h, 1.0),
                update_w: b.weight(format!("layer{l}.update.w"), &[3 * h, h], 3 * h, 1.0),
                update_b: b.filled(format!("layer{l}.update.b"), &[h], 0.0),
            })
            .collect();

        let (policy_w, policy_b, log_std) = match config.output_head {
            OutputHead::Shared => (
                b.weight("policy.w".into(), &[h, c], h, 0.1),
                b.filled("policy.b".into(), &[c], 0.0),
                b.filled("policy.log_std".into(), &[2, 1], config.init_log_std),
            ),
            OutputHead::Separate { nodes } => (
                b.weight("policy.w".into(), &[nodes, h, c], h, 0.1),
                b.filled("policy.b".into(), &[nodes, c], 0.0),
                b.filled("policy.log_std".into(), &[nodes, 1], config.init_log_std),
            ),
        };

        let vin = config.value_inputs();
        let value_w1 = b.weight("value.w1".into(), &[vin, mh], vin, 1.0);
        let value_b1 = b.filled("value.b1".into(), &[mh], 0.0);
        let value_w2 = b.weight("value.w2".into(), &[mh, 1], mh, 1.0);
        let value_b2 = b.filled("value.b2".into(), &[1], 0.0);

        let layout = Layout {
            embed_w,
            embed_b,
            embed_mix,
            layers,
            policy_w,
            policy_b,
            log_std,
            value_w1,
            value_b1,
            value_w2,
            value_b2,
        };
        Self {
            config,
            names: b.names,
            tensors: b.tensors,
            layout,
        }
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor, checking names and shapes against the layout.
    pub fn load_tensors(&mut self, named: Vec<(String, Tensor)>) -> std::result::Result<(), String> {
        if named.len() != self.tensors.len() {
            return Err(format!(
                "expected {} parameter tensors, found {}",
                self.tensors.len(),
                named.len()
            ));
        }
        for ((name, t), (own_name, own)) in named.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != own_name {
                return Err(format!("expected tensor {own_name}, found {name}"));
            }
            if t.shape() != own.shape() {
                return Err(format!(
                    "tensor {name}: shape {:?} does not match {:?}",
                    t.shape(),
                    own.shape()
                ));
            }
        }
        self.tensors = named.into_iter().map(|(_, t)| t).collect();
        Ok(())
    }

    /// Errors unless these parameters can drive `graph`.
    pub fn check_graph(&self, graph: &MorphologyGraph) -> Result<()> {
        match self.config.output_head {
            OutputHead::Separate { nodes } if nodes != graph.node_count() => Err(NetError::HeadMismatch {
                built: nodes,
                found: graph.node_count(),
            }),
            _ => Ok(()),
        }
    }
}
