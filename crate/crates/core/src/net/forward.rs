use super::{policy, GravityFrame, NetConfig, NetError, NetParams, OutputHead, Result, INPUT_VECTORS};
use crate::envs::Observation;
use crate::morphology::{MorphologyGraph, ShapeDescriptor};
use crate::tensor::{Tape, Tensor, Var};

/// Subtracts the mean of all rows from each row of an `n x dim` array.
pub fn center_vectors(positions: &[f64], dim: usize) -> Vec<f64> {
    let n = positions.len() / dim;
    let mut mean = vec![0.0; dim];
    for row in positions.chunks_exact(dim) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut out = positions.to_vec();
    for row in out.chunks_exact_mut(dim) {
        for (x, m) in row.iter_mut().zip(&mean) {
            *x -= m;
        }
    }
    out
}

/// `B` copies of one morphology laid out as a disjoint union: node `v` of
/// copy `b` is row `b * n + v`.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub batch: usize,
    pub nodes: usize,
    pub dim: usize,
    receivers: Vec<usize>,
    senders: Vec<usize>,
    norms: Vec<f64>,
    kinds: Vec<usize>,
    local_index: Vec<usize>,
    node_shapes: Vec<[f64; ShapeDescriptor::FEATURES]>,
    shape_recv: Tensor,
    shape_send: Tensor,
    gravity_edges: Tensor,
    gravity_nodes: Tensor,
}

impl GraphBatch {
    pub fn new(graph: &MorphologyGraph, frame: &GravityFrame, batch: usize) -> Self {
        let n = graph.node_count();
        let d = frame.dim();
        let edges = graph.directed_edges();
        let mut receivers = Vec::with_capacity(batch * edges.len());
        let mut senders = Vec::with_capacity(batch * edges.len());
        let mut norms = Vec::with_capacity(batch * edges.len());
        for b in 0..batch {
            for e in &edges {
                receivers.push(b * n + e.receiver);
                senders.push(b * n + e.sender);
                norms.push(e.norm);
            }
        }
        let feats: Vec<[f64; ShapeDescriptor::FEATURES]> =
            graph.nodes().iter().map(|s| s.shape.features()).collect();
        let shape_rows = |idx: &[usize]| {
            let data = idx.iter().flat_map(|&g| feats[g % n]).collect();
            Tensor::new(vec![idx.len(), ShapeDescriptor::FEATURES], data).expect("shape rows")
        };
        let kinds = (0..batch * n)
            .map(|g| graph.nodes()[g % n].kind.index())
            .collect();
        let repeat_g = |rows: usize| {
            let data = (0..rows).flat_map(|_| frame.g_hat().iter().copied()).collect();
            Tensor::new(vec![rows, d, 1], data).expect("gravity rows")
        };
        Self {
            batch,
            nodes: n,
            dim: d,
            shape_recv: shape_rows(&receivers),
            shape_send: shape_rows(&senders),
            gravity_edges: repeat_g(receivers.len()),
            gravity_nodes: repeat_g(batch * n),
            kinds,
            local_index: (0..batch * n).map(|g| g % n).collect(),
            node_shapes: feats,
            receivers,
            senders,
            norms,
        }
    }

    pub fn total_nodes(&self) -> usize {
        self.batch * self.nodes
    }

    pub fn total_edges(&self) -> usize {
        self.receivers.len()
    }
}

/// Parameters registered on a tape.
pub struct BoundParams<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> BoundParams<'t> {
    /// Registers every tensor; `trainable = false` records them as constants.
    pub fn new(tape: &'t Tape, params: &NetParams, trainable: bool) -> Self {
        let vars = params
            .tensors()
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Self { vars }
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    fn get(&self, i: usize) -> Var<'t> {
        self.vars[i]
    }
}

/// Scalar (`n x h`) and vector (`n x d x c`) node channels.
#[derive(Debug, Clone, Copy)]
pub struct NodeVars<'t> {
    pub h: Var<'t>,
    pub z: Var<'t>,
}

/// Everything a forward pass produces, still on the tape.
pub struct ForwardVars<'t> {
    pub features: NodeVars<'t>,
    /// `(B*n) x d`
    pub mu_vec: Var<'t>,
    /// `B*n`
    pub log_std: Var<'t>,
    /// `B`
    pub value: Var<'t>,
    /// Per-node mean torque, planar inputs only.
    pub action_mean: Option<Var<'t>>,
}

/// Detached forward results for one or more graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub mu_vec: Tensor,
    pub log_std: Vec<f64>,
    pub value: Vec<f64>,
    pub action_mean: Option<Vec<f64>>,
    pub hidden: Tensor,
}

fn check_observations(cfg: &NetConfig, gb: &GraphBatch, obs: &[Observation]) -> Result<()> {
    if obs.len() != gb.batch {
        return Err(NetError::Layout(format!(
            "{} observations for a batch of {}",
            obs.len(),
            gb.batch
        )));
    }
    for o in obs {
        if o.dim != cfg.dim || o.dim != gb.dim {
            return Err(NetError::Layout(format!(
                "observation dimension {} but network dimension {}",
                o.dim, cfg.dim
            )));
        }
        if o.node_count() != gb.nodes
            || o.positions.len() != gb.nodes * o.dim
            || o.directions.len() != gb.nodes * o.dim
            || o.velocities.len() != gb.nodes * o.dim
        {
            return Err(NetError::Layout(format!(
                "observation has {} nodes, graph has {}",
                o.node_count(),
                gb.nodes
            )));
        }
    }
    Ok(())
}

/// Initial node features: invariant scalars through the embedding layer and
/// the observed vectors (centered position, direction, velocity) mixed into
/// `c` channels.
pub fn encode<'t>(
    tape: &'t Tape,
    params: &NetParams,
    bound: &BoundParams<'t>,
    gb: &GraphBatch,
    obs: &[Observation],
) -> Result<NodeVars<'t>> {
    let cfg = params.config();
    check_observations(cfg, gb, obs)?;
    let lay = params.layout();
    let d = cfg.dim;
    let n_total = gb.total_nodes();

    let mut zin = Vec::with_capacity(n_total * d * INPUT_VECTORS);
    let mut scalars = Vec::with_capacity(n_total * cfg.embed_inputs());
    for o in obs {
        let centered = center_vectors(&o.positions, d);
        for v in 0..gb.nodes {
            let start = zin.len();
            for a in 0..d {
                let dir = if cfg.zero_directions {
                    0.0
                } else {
                    o.directions[v * d + a]
                };
                zin.extend([centered[v * d + a], dir, o.velocities[v * d + a]]);
            }
            let feats = gb.node_shapes[v];
            if cfg.subequivariant {
                scalars.push(o.spins[v].abs());
                scalars.extend(feats);
            } else {
                scalars.push(o.spins[v]);
                scalars.extend(feats);
                scalars.extend_from_slice(&zin[start..]);
            }
        }
    }
    let zin = tape.constant(Tensor::new(vec![n_total * d, INPUT_VECTORS], zin)?);
    let scalars = tape.constant(Tensor::new(vec![n_total, cfg.embed_inputs()], scalars)?);

    let h = scalars
        .matmul(bound.get(lay.embed_w))?
        .add_row(bound.get(lay.embed_b))?
        .tanh();
    let z = zin
        .matmul(bound.get(lay.embed_mix))?
        .reshape(&[n_total, d, cfg.vector_channels])?;
    Ok(NodeVars { h, z })
}

/// Messages along every directed edge of the batch: `(E x h, E x d x c)`.
pub fn message<'t>(
    tape: &'t Tape,
    params: &NetParams,
    bound: &BoundParams<'t>,
    layer: usize,
    gb: &GraphBatch,
    feats: NodeVars<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let cfg = params.config();
    let li = &params.layout().layers[layer];
    let e = gb.total_edges();
    let (d, c, k) = (cfg.dim, cfg.vector_channels, cfg.stack_width());

    let zi = feats.z.gather_rows(&gb.receivers)?;
    let zj = feats.z.gather_rows(&gb.senders)?;
    let g = tape.constant(gb.gravity_edges.clone());
    let stack = Var::concat(&[zi, zj, g])?; // E x d x k

    let geometric = if cfg.subequivariant {
        let gram = stack.transpose_last2()?.bmm(stack)?.reshape(&[e, k * k])?;
        let upper: Vec<usize> = (0..k).flat_map(|r| (r..k).map(move |s| r * k + s)).collect();
        gram.select_cols(&upper)?.asinh()
    } else {
        stack.reshape(&[e, d * k])?.asinh()
    };

    let hi = feats.h.gather_rows(&gb.receivers)?;
    let hj = feats.h.gather_rows(&gb.senders)?;
    let si = tape.constant(gb.shape_recv.clone());
    let sj = tape.constant(gb.shape_send.clone());
    let input = Var::concat(&[hi, hj, si, sj, geometric])?;

    let hidden = input
        .matmul(bound.get(li.msg_w1))?
        .add_row(bound.get(li.msg_b1))?
        .tanh();
    let scalar = hidden.matmul(bound.get(li.msg_ws))?.add_row(bound.get(li.msg_bs))?;
    let mixing = hidden
        .matmul(bound.get(li.msg_wm))?
        .add_row(bound.get(li.msg_bm))?
        .reshape(&[e, k, c])?;
    let vector = stack.bmm(mixing)?;
    Ok((scalar, vector))
}

/// GCN-normalized neighbor sums plus the self-loop terms: scalar
/// pre-activation `sum norm * m + W0 h` and vector state `sum norm * V M + Z`.
pub fn aggregate<'t>(
    params: &NetParams,
    bound: &BoundParams<'t>,
    layer: usize,
    gb: &GraphBatch,
    messages: (Var<'t>, Var<'t>),
    feats: NodeVars<'t>,
) -> Result<NodeVars<'t>> {
    let cfg = params.config();
    let li = &params.layout().layers[layer];
    let n = gb.total_nodes();
    let (d, c) = (cfg.dim, cfg.vector_channels);
    let (scalar, vector) = messages;

    let h = scalar
        .scale_rows(&gb.norms)?
        .scatter_add(&gb.receivers, n)?
        .add(feats.h.matmul(bound.get(li.self_w0))?)?;
    let z = vector
        .reshape(&[gb.total_edges(), d * c])?
        .scale_rows(&gb.norms)?
        .scatter_add(&gb.receivers, n)?
        .reshape(&[n, d, c])?
        .add(feats.z)?;
    Ok(NodeVars { h, z })
}

/// `H' = tanh(W [agg, H, H_prev] + b)`; vectors pass through linearly.
pub fn layer_update<'t>(
    params: &NetParams,
    bound: &BoundParams<'t>,
    layer: usize,
    agg: NodeVars<'t>,
    h_current: Var<'t>,
    h_previous: Var<'t>,
) -> Result<NodeVars<'t>> {
    let li = &params.layout().layers[layer];
    let h = Var::concat(&[agg.h, h_current, h_previous])?
        .matmul(bound.get(li.update_w))?
        .add_row(bound.get(li.update_b))?
        .tanh();
    Ok(NodeVars { h, z: agg.z })
}

/// Full pass on a batch: encode, `L` propagation steps, readouts.
pub fn forward_vars<'t>(
    tape: &'t Tape,
    params: &NetParams,
    bound: &BoundParams<'t>,
    gb: &GraphBatch,
    obs: &[Observation],
) -> Result<ForwardVars<'t>> {
    let cfg = params.config();
    let lay = params.layout();
    let n = gb.total_nodes();
    let (d, c) = (cfg.dim, cfg.vector_channels);
    if let OutputHead::Separate { nodes } = cfg.output_head {
        if nodes != gb.nodes {
            return Err(NetError::HeadMismatch {
                built: nodes,
                found: gb.nodes,
            });
        }
    }

    let mut feats = encode(tape, params, bound, gb, obs)?;
    let mut h_prev = tape.constant(Tensor::zeros(&[n, cfg.hidden]));
    for layer in 0..cfg.propagation_steps {
        let msgs = message(tape, params, bound, layer, gb, feats)?;
        let agg = aggregate(params, bound, layer, gb, msgs, feats)?;
        let next = layer_update(params, bound, layer, agg, feats.h, h_prev)?;
        h_prev = feats.h;
        feats = next;
    }

    let (phi, log_std) = match cfg.output_head {
        OutputHead::Shared => (
            feats
                .h
                .matmul(bound.get(lay.policy_w))?
                .add_row(bound.get(lay.policy_b))?,
            bound.get(lay.log_std).gather_rows(&gb.kinds)?.reshape(&[n])?,
        ),
        OutputHead::Separate { .. } => {
            let w = bound.get(lay.policy_w).gather_rows(&gb.local_index)?;
            let b = bound.get(lay.policy_b).gather_rows(&gb.local_index)?;
            let phi = feats
                .h
                .reshape(&[n, 1, cfg.hidden])?
                .bmm(w)?
                .reshape(&[n, c])?
                .add(b)?;
            let ls = bound.get(lay.log_std).gather_rows(&gb.local_index)?.reshape(&[n])?;
            (phi, ls)
        }
    };
    let mu_vec = feats.z.bmm(phi.reshape(&[n, c, 1])?)?.reshape(&[n, d])?;

    let pooled_inputs = if cfg.subequivariant {
        let norms = feats.z.square().sum(Some(1))?.asinh();
        let g = tape.constant(gb.gravity_nodes.clone());
        let along_g = feats.z.transpose_last2()?.bmm(g)?.reshape(&[n, c])?.asinh();
        Var::concat(&[feats.h, norms, along_g])?
    } else {
        Var::concat(&[feats.h, feats.z.reshape(&[n, d * c])?.asinh()])?
    };
    let width = cfg.value_inputs();
    let pooled = pooled_inputs
        .reshape(&[gb.batch, gb.nodes, width])?
        .mean(Some(1))?;
    let value = pooled
        .matmul(bound.get(lay.value_w1))?
        .add_row(bound.get(lay.value_b1))?
        .tanh()
        .matmul(bound.get(lay.value_w2))?
        .add_row(bound.get(lay.value_b2))?
        .reshape(&[gb.batch])?;

    let action_mean = if d == 2 {
        let dirs: Vec<f64> = obs.iter().flat_map(|o| o.directions.iter().copied()).collect();
        Some(policy::torque_means(mu_vec, &dirs)?)
    } else {
        None
    };

    Ok(ForwardVars {
        features: feats,
        mu_vec,
        log_std,
        value,
        action_mean,
    })
}

/// Forward pass on several observations of the same morphology.
pub fn forward_batch(
    params: &NetParams,
    graph: &MorphologyGraph,
    frame: &GravityFrame,
    obs: &[Observation],
) -> Result<PolicyOutput> {
    params.check_graph(graph)?;
    if frame.dim() != params.config().dim {
        return Err(NetError::Layout(format!(
            "gravity frame dimension {} but network dimension {}",
            frame.dim(),
            params.config().dim
        )));
    }
    let gb = GraphBatch::new(graph, frame, obs.len());
    let tape = Tape::new();
    let bound = BoundParams::new(&tape, params, false);
    let out = forward_vars(&tape, params, &bound, &gb, obs)?;
    let result = PolicyOutput {
        mu_vec: out.mu_vec.to_tensor(),
        log_std: out.log_std.to_tensor().into_data(),
        value: out.value.to_tensor().into_data(),
        action_mean: out.action_mean.map(|a| a.to_tensor().into_data()),
        hidden: out.features.h.to_tensor(),
    };
    Ok(result)
}

/// Forward pass on a single observation.
pub fn forward(
    params: &NetParams,
    graph: &MorphologyGraph,
    frame: &GravityFrame,
    obs: &Observation,
) -> Result<PolicyOutput> {
    forward_batch(params, graph, frame, std::slice::from_ref(obs))
}

/// Observation with standard-normal vectors and spins, for synthetic checks.
pub fn random_observation(dim: usize, nodes: usize, rng: &mut crate::rng::RngStream) -> Observation {
    let mut draw = |len: usize| (0..len).map(|_| rng.normal()).collect::<Vec<f64>>();
    Observation {
        dim,
        positions: draw(nodes * dim),
        directions: draw(nodes * dim),
        velocities: draw(nodes * dim),
        spins: draw(nodes),
    }
}

/// Largest deviations `(hidden, value, mu)` between `forward(O x)` and the
/// prediction from `forward(x)`: invariant scalars and `O mu`.
pub fn symmetry_deviation(
    params: &NetParams,
    graph: &MorphologyGraph,
    frame: &GravityFrame,
    obs: &Observation,
    o: &[f64],
) -> Result<(f64, f64, f64)> {
    let d = obs.dim;
    let base = forward(params, graph, frame, obs)?;
    let moved = forward(params, graph, frame, &obs.transformed(o))?;
    let dh = base.hidden.max_abs_diff(&moved.hidden)?;
    let dv = (base.value[0] - moved.value[0]).abs();
    let mut dmu: f64 = 0.0;
    for (src, dst) in base.mu_vec.data().chunks_exact(d).zip(moved.mu_vec.data().chunks_exact(d)) {
        for i in 0..d {
            let expect: f64 = (0..d).map(|j| o[i * d + j] * src[j]).sum();
            dmu = dmu.max((expect - dst[i]).abs());
        }
    }
    Ok((dh, dv, dmu))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{random_orthogonal, random_tilt};
    use crate::rng::{Domain, RngStream};

    fn small(dim: usize) -> NetConfig {
        NetConfig {
            dim,
            hidden: 8,
            vector_channels: 3,
            propagation_steps: 2,
            message_hidden: 6,
            ..Default::default()
        }
    }

    fn params(cfg: NetConfig, seed: u64) -> NetParams {
        NetParams::init(cfg, &mut RngStream::new(seed, Domain::Init, 0))
    }

    #[test]
    fn center_vectors_examples() {
        assert_eq!(center_vectors(&[1.0, 1.0, 3.0, 3.0], 2), vec![-1.0, -1.0, 1.0, 1.0]);
        assert_eq!(center_vectors(&[5.0, 2.0], 2), vec![0.0, 0.0]);
        let c = center_vectors(&[0.3, -2.0, 1.7, 0.4, 9.0, 1.0], 2);
        assert!((c[0] + c[2] + c[4]).abs() < 1e-15 && (c[1] + c[3] + c[5]).abs() < 1e-15);
    }

    #[test]
    fn forward_is_deterministic_and_finite() {
        let g = MorphologyGraph::chain(3, 1.0, 1.0, false).unwrap();
        let p = params(small(2), 1);
        let obs = random_observation(2, 4, &mut RngStream::new(0, Domain::Check, 0));
        let a = forward(&p, &g, &GravityFrame::down(2), &obs).unwrap();
        let b = forward(&p, &g, &GravityFrame::down(2), &obs).unwrap();
        assert_eq!(a, b);
        assert!(a.mu_vec.is_finite() && a.value[0].is_finite());
        assert_eq!(a.mu_vec.shape(), &[4, 2]);
        assert_eq!(a.log_std, vec![-0.5; 4]);
        assert_eq!(a.action_mean.unwrap().len(), 4);
    }

    #[test]
    fn subequivariance_in_three_dimensions() {
        let frame = GravityFrame::down(3);
        let g = MorphologyGraph::chain(3, 1.0, 1.0, true).unwrap();
        let p = params(small(3), 2);
        let mut rng = RngStream::new(1, Domain::Check, 0);
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let obs = random_observation(3, 4, &mut rng);
            for _ in 0..4 {
                let o = random_orthogonal(frame.g_hat(), &mut rng);
                let (dh, dv, dmu) = symmetry_deviation(&p, &g, &frame, &obs, &o).unwrap();
                worst = worst.max(dh).max(dv).max(dmu);
            }
        }
        assert!(worst < 1e-8, "{worst}");
    }

    #[test]
    fn planar_mirror_equivariance_and_torque_flip() {
        let frame = GravityFrame::down(2);
        let g = MorphologyGraph::chain(3, 1.0, 1.0, false).unwrap();
        let p = params(small(2), 3);
        let obs = random_observation(2, 4, &mut RngStream::new(2, Domain::Check, 0));
        let base = forward(&p, &g, &frame, &obs).unwrap();
        let mirrored = forward(&p, &g, &frame, &obs.reflect_x()).unwrap();
        for (a, b) in base.action_mean.unwrap().iter().zip(mirrored.action_mean.unwrap()) {
            assert!((a + b).abs() < 1e-10);
        }
        assert!((base.value[0] - mirrored.value[0]).abs() < 1e-10);
    }

    #[test]
    fn gravity_tilt_breaks_invariance() {
        let frame = GravityFrame::down(3);
        let g = MorphologyGraph::chain(3, 1.0, 1.0, false).unwrap();
        let p = params(small(3), 4);
        let mut rng = RngStream::new(3, Domain::Check, 0);
        let obs = random_observation(3, 4, &mut rng);
        let o = random_tilt(frame.g_hat(), &mut rng);
        let (dh, dv, dmu) = symmetry_deviation(&p, &g, &frame, &obs, &o).unwrap();
        assert!(dh.max(dv).max(dmu) > 1e-3);
    }

    #[test]
    fn translation_invariance() {
        let frame = GravityFrame::down(2);
        let g = MorphologyGraph::chain(4, 1.0, 1.0, false).unwrap();
        let p = params(small(2), 5);
        let obs = random_observation(2, 5, &mut RngStream::new(4, Domain::Check, 0));
        let a = forward(&p, &g, &frame, &obs).unwrap();
        let b = forward(&p, &g, &frame, &obs.translated(&[13.5, -7.25])).unwrap();
        assert!(a.mu_vec.max_abs_diff(&b.mu_vec).unwrap() < 1e-12);
        assert!((a.value[0] - b.value[0]).abs() < 1e-12);
    }

    #[test]
    fn permutation_equivariance() {
        let frame = GravityFrame::down(2);
        let g = MorphologyGraph::chain(4, 1.0, 1.0, true).unwrap();
        let p = params(small(2), 6);
        let mut rng = RngStream::new(5, Domain::Check, 0);
        let obs = random_observation(2, 5, &mut rng);
        let perm = rng.permutation(5);
        let a = forward(&p, &g, &frame, &obs).unwrap();
        let b = forward(&p, &g.permuted(&perm), &frame, &obs.permuted(&perm)).unwrap();
        for (old, &new) in perm.iter().enumerate() {
            for k in 0..2 {
                let x = a.mu_vec.data()[old * 2 + k];
                let y = b.mu_vec.data()[new * 2 + k];
                assert!((x - y).abs() < 1e-8);
            }
        }
        assert!((a.value[0] - b.value[0]).abs() < 1e-8);
    }

    #[test]
    fn batching_is_bitwise_neutral() {
        let frame = GravityFrame::down(2);
        let g = MorphologyGraph::chain(3, 1.0, 1.0, false).unwrap();
        let p = params(small(2), 7);
        let mut rng = RngStream::new(6, Domain::Check, 0);
        let obs: Vec<_> = (0..3).map(|_| random_observation(2, 4, &mut rng)).collect();
        let batch = forward_batch(&p, &g, &frame, &obs).unwrap();
        for (b, o) in obs.iter().enumerate() {
            let single = forward(&p, &g, &frame, o).unwrap();
            assert_eq!(single.mu_vec.data(), &batch.mu_vec.data()[b * 8..(b + 1) * 8]);
            assert_eq!(single.value[0].to_bits(), batch.value[b].to_bits());
        }
    }

    #[test]
    fn zero_observation_features_follow_shapes() {
        let frame = GravityFrame::down(2);
        let g = MorphologyGraph::chain(3, 1.0, 1.0, false).unwrap();
        let p = params(small(2), 8);
        let gb = GraphBatch::new(&g, &frame, 1);
        let tape = Tape::new();
        let bound = BoundParams::new(&tape, &p, false);
        let feats = encode(&tape, &p, &bound, &gb, &[Observation::zeros(2, 4)]).unwrap();
        assert!(feats.z.value().data().iter().all(|&x| x == 0.0));
        // Interior joints share a shape descriptor, so their rows agree.
        let h = feats.h.to_tensor();
        assert_eq!(h.data()[8..16], h.data()[16..24]);
    }

    #[test]
    fn mirrored_twins_get_equal_scalars() {
        let frame = GravityFrame::down(2);
        let g = MorphologyGraph::chain(3, 1.0, 1.0, false).unwrap();
        let p = params(small(2), 9);
        let gb = GraphBatch::new(&g, &frame, 1);
        let mut obs = Observation::zeros(2, 4);
        obs.spins[1] = 0.7;
        obs.spins[2] = -0.7;
        obs.directions[2..6].copy_from_slice(&[0.6, 0.8, -0.6, 0.8]);
        let tape = Tape::new();
        let bound = BoundParams::new(&tape, &p, false);
        let h = encode(&tape, &p, &bound, &gb, &[obs]).unwrap().h.to_tensor();
        assert_eq!(h.data()[8..16], h.data()[16..24]);
    }

    #[test]
    fn message_with_empty_vectors_sees_only_gravity() {
        let frame = GravityFrame::down(2);
        let g = MorphologyGraph::chain(1, 1.0, 1.0, false).unwrap();
        let mut cfg = small(2);
        cfg.propagation_steps = 1;
        let p = params(cfg, 10);
        let gb = GraphBatch::new(&g, &frame, 1);
        let tape = Tape::new();
        let bound = BoundParams::new(&tape, &p, false);
        let feats = NodeVars {
            h: tape.constant(Tensor::zeros(&[2, 8])),
            z: tape.constant(Tensor::zeros(&[2, 2, 3])),
        };
        let (_, vector) = message(&tape, &p, &bound, 0, &gb, feats).unwrap();
        // V = [0 | 0 | g], so V M is g times the last row of M.
        let v = vector.to_tensor();
        for e in 0..2 {
            for ch in 0..3 {
                assert_eq!(v.data()[e * 6 + ch], 0.0);
            }
        }
    }

    #[test]
    fn zero_messages_aggregate_to_self_terms() {
        let frame = GravityFrame::down(2);
        let g = MorphologyGraph::chain(2, 1.0, 1.0, false).unwrap();
        let p = params(small(2), 11);
        let gb = GraphBatch::new(&g, &frame, 1);
        let tape = Tape::new();
        let bound = BoundParams::new(&tape, &p, false);
        let mut rng = RngStream::new(0, Domain::Check, 3);
        let h = Tensor::new(vec![3, 8], (0..24).map(|_| rng.normal()).collect()).unwrap();
        let z = Tensor::new(vec![3, 2, 3], (0..18).map(|_| rng.normal()).collect()).unwrap();
        let feats = NodeVars {
            h: tape.constant(h.clone()),
            z: tape.constant(z.clone()),
        };
        let msgs = (
            tape.constant(Tensor::zeros(&[4, 8])),
            tape.constant(Tensor::zeros(&[4, 2, 3])),
        );
        let agg = aggregate(&p, &bound, 0, &gb, msgs, feats).unwrap();
        let w0 = &p.tensors()[p.layout().layers[0].self_w0];
        let expect = crate::tensor::matmul_raw(h.data(), w0.data(), 3, 8, 8);
        assert_eq!(agg.h.value().data(), expect.as_slice());
        assert_eq!(agg.z.value().data(), z.data());
    }

    #[test]
    fn middle_node_weights_follow_degrees() {
        // chain(3) has degrees 1, 2, 2, 1; node 1 hears node 0 with weight
        // 1/sqrt(2) and node 2 with weight 1/2.
        let frame = GravityFrame::down(2);
        let g = MorphologyGraph::chain(3, 1.0, 1.0, false).unwrap();
        let mut cfg = small(2);
        cfg.hidden = 1;
        let mut p = params(cfg, 12);
        let w0 = p.layout().layers[0].self_w0;
        p.tensors_mut()[w0] = Tensor::zeros(&[1, 1]);
        let gb = GraphBatch::new(&g, &frame, 1);
        let tape = Tape::new();
        let bound = BoundParams::new(&tape, &p, false);
        let feats = NodeVars {
            h: tape.constant(Tensor::zeros(&[4, 1])),
            z: tape.constant(Tensor::zeros(&[4, 2, 3])),
        };
        // Message value on edge e is e + 1.
        let e = gb.total_edges();
        let scalars = tape.constant(Tensor::new(vec![e, 1], (1..=e).map(|x| x as f64).collect()).unwrap());
        let msgs = (scalars, tape.constant(Tensor::zeros(&[e, 2, 3])));
        let agg = aggregate(&p, &bound, 0, &gb, msgs, feats).unwrap();
        let mut expect = 0.0;
        for (k, edge) in g.directed_edges().iter().enumerate() {
            if edge.receiver == 1 {
                let w = if edge.sender == 0 { 1.0 / 2f64.sqrt() } else { 0.5 };
                expect += w * (k + 1) as f64;
            }
        }
        assert!((agg.h.value().data()[1] - expect).abs() < 1e-15);
    }

    #[test]
    fn zero_inputs_give_tanh_of_bias() {
        let mut cfg = small(2);
        cfg.hidden = 2;
        let mut p = params(cfg, 13);
        let ub = p.layout().layers[0].update_b;
        p.tensors_mut()[ub] = Tensor::vector(vec![0.3, -0.2]);
        let tape = Tape::new();
        let bound = BoundParams::new(&tape, &p, false);
        let zeros = tape.constant(Tensor::zeros(&[3, 2]));
        let agg = NodeVars {
            h: zeros,
            z: tape.constant(Tensor::zeros(&[3, 2, 3])),
        };
        let out = layer_update(&p, &bound, 0, agg, zeros, zeros).unwrap();
        assert_eq!(out.h.value().data()[..2], [0.3f64.tanh(), (-0.2f64).tanh()]);
    }

    #[test]
    fn ablation_and_direction_zeroing_run() {
        let frame = GravityFrame::down(2);
        let g = MorphologyGraph::chain(3, 1.0, 1.0, false).unwrap();
        let obs = random_observation(2, 4, &mut RngStream::new(7, Domain::Check, 0));
        let mut cfg = small(2);
        cfg.subequivariant = false;
        let out = forward(&params(cfg, 14), &g, &frame, &obs).unwrap();
        assert!(out.mu_vec.is_finite());
        let mut cfg = small(2);
        cfg.zero_directions = true;
        let p = params(cfg, 15);
        let mut other = obs.clone();
        other.directions.iter_mut().for_each(|x| *x *= -3.0);
        let a = forward(&p, &g, &frame, &obs).unwrap();
        let b = forward(&p, &g, &frame, &other).unwrap();
        assert_eq!(a.mu_vec, b.mu_vec);
    }

    #[test]
    fn separate_heads_reject_other_sizes() {
        let frame = GravityFrame::down(2);
        let mut cfg = small(2);
        cfg.output_head = OutputHead::Separate { nodes: 4 };
        let p = params(cfg, 16);
        let g3 = MorphologyGraph::chain(3, 1.0, 1.0, false).unwrap();
        let g4 = MorphologyGraph::chain(4, 1.0, 1.0, false).unwrap();
        let mut rng = RngStream::new(8, Domain::Check, 0);
        assert!(forward(&p, &g3, &frame, &random_observation(2, 4, &mut rng)).is_ok());
        assert!(matches!(
            forward(&p, &g4, &frame, &random_observation(2, 5, &mut rng)),
            Err(NetError::HeadMismatch { built: 4, found: 5 })
        ));
    }

    #[test]
    fn shared_model_transfers_across_sizes() {
        let frame = GravityFrame::down(2);
        let p = params(small(2), 17);
        let mut rng = RngStream::new(9, Domain::Check, 0);
        for links in [2, 3, 5] {
            let g = MorphologyGraph::chain(links, 1.0, 1.0, false).unwrap();
            let out = forward(&p, &g, &frame, &random_observation(2, links + 1, &mut rng)).unwrap();
            assert_eq!(out.mu_vec.shape(), &[links + 1, 2]);
        }
    }

    #[test]
    fn layout_mismatch_is_reported() {
        let frame = GravityFrame::down(2);
        let g = MorphologyGraph::chain(3, 1.0, 1.0, false).unwrap();
        let p = params(small(2), 18);
        let obs = random_observation(2, 3, &mut RngStream::new(0, Domain::Check, 9));
        assert!(matches!(forward(&p, &g, &frame, &obs), Err(NetError::Layout(_))));
    }

    fn scalar_loss(p: &NetParams, g: &MorphologyGraph, obs: &[Observation]) -> f64 {
        let out = forward_batch(p, g, &GravityFrame::down(2), obs).unwrap();
        let mu: f64 = out.action_mean.unwrap().iter().enumerate().map(|(i, m)| m * (i as f64 * 0.3 - 0.5)).sum();
        mu + out.value.iter().map(|v| v * v).sum::<f64>() + out.log_std.iter().sum::<f64>()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let g = MorphologyGraph::chain(2, 1.0, 1.0, true).unwrap();
        let mut cfg = small(2);
        cfg.hidden = 4;
        cfg.message_hidden = 4;
        for sub in [true, false] {
            cfg.subequivariant = sub;
            let p = params(cfg.clone(), 19);
            let mut rng = RngStream::new(10, Domain::Check, 0);
            let obs: Vec<_> = (0..2).map(|_| random_observation(2, 3, &mut rng)).collect();

            let tape = Tape::new();
            let bound = BoundParams::new(&tape, &p, true);
            let gb = GraphBatch::new(&g, &GravityFrame::down(2), 2);
            let out = forward_vars(&tape, &p, &bound, &gb, &obs).unwrap();
            let n = gb.total_nodes();
            let coef = Tensor::vector((0..n).map(|i| i as f64 * 0.3 - 0.5).collect());
            let loss = out
                .action_mean
                .unwrap()
                .mul_const(&coef)
                .unwrap()
                .sum(None)
                .unwrap()
                .add(out.value.square().sum(None).unwrap())
                .unwrap()
                .add(out.log_std.sum(None).unwrap())
                .unwrap();
            assert!((loss.item() - scalar_loss(&p, &g, &obs)).abs() < 1e-12);
            let grads = loss.backward().unwrap();

            let h = 1e-6;
            for (ti, var) in bound.vars().iter().enumerate() {
                let analytic = grads.wrt(*var);
                for k in 0..p.tensors()[ti].len() {
                    let mut plus = p.clone();
                    plus.tensors_mut()[ti].data_mut()[k] += h;
                    let mut minus = p.clone();
                    minus.tensors_mut()[ti].data_mut()[k] -= h;
                    let fd = (scalar_loss(&plus, &g, &obs) - scalar_loss(&minus, &g, &obs)) / (2.0 * h);
                    let a = analytic.data()[k];
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                    assert!(rel < 1e-4, "{} [{k}]: {a} vs {fd}", p.names()[ti]);
                }
            }
        }
    }
}
