use std::cell::{Ref, RefCell};

use super::{matmul_acc, matmul_raw, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy)]
enum Unary {
    Neg,
    Tanh,
    Exp,
    Log,
    Sqrt,
    Square,
    Softplus,
    Asinh,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Min(usize, usize),
    Unary(Unary, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddConst(usize),
    MulConst(usize, Vec<f64>),
    Clip(usize, f64, f64),
    MatMul(usize, usize),
    Bmm(usize, usize),
    AddRow(usize, usize),
    ScaleRows(usize, Vec<f64>),
    Reduce {
        input: usize,
        outer: usize,
        len: usize,
        inner: usize,
        mean: bool,
    },
    Reshape(usize),
    Concat(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    ScatterAdd(usize, Vec<usize>),
    SelectCols(usize, Vec<usize>),
    TransposeLast2(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations. Inputs always precede their outputs.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of a scalar loss with respect to every recorded node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; exactly zero when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        let shape = self.shapes[var.id].clone();
        match &self.grads[var.id] {
            Some(g) => Tensor {
                shape,
                data: g.clone(),
            },
            None => Tensor::zeros(&shape),
        }
    }

    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads[var.id].as_deref()
    }
}

fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

fn transpose_last2_raw(data: &[f64], batch: usize, r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for b in 0..batch {
        let src = &data[b * r * c..(b + 1) * r * c];
        let dst = &mut out[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

fn reduce_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable leaf; receives a gradient on backward.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Reverse pass from a scalar `loss`. Nodes are visited in reverse
    /// recording order and gradients accumulate additively across fan-out.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn propagate(&self, nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &nodes[id];
        let y = &node.value.data;
        let wants = |i: usize| nodes[i].requires_grad;
        let len_of = |i: usize| nodes[i].value.data.len();

        // Scalar-with-tensor broadcast: gradient of the scalar side is a sum.
        let bin = |grads: &mut [Option<Vec<f64>>], i: usize, local: &dyn Fn(usize) -> f64| {
            if !wants(i) {
                return;
            }
            let n = len_of(i);
            accumulate(&mut grads[i], n, |buf| {
                if n == g.len() {
                    for k in 0..n {
                        buf[k] += g[k] * local(k);
                    }
                } else {
                    buf[0] += (0..g.len()).map(|k| g[k] * local(k)).sum::<f64>();
                }
            });
        };
        let val = |i: usize, k: usize| {
            let d = &nodes[i].value.data;
            if d.len() == 1 {
                d[0]
            } else {
                d[k]
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                bin(grads, *a, &|_| 1.0);
                bin(grads, *b, &|_| 1.0);
            }
            Op::Sub(a, b) => {
                bin(grads, *a, &|_| 1.0);
                bin(grads, *b, &|_| -1.0);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                bin(grads, a, &|k| val(b, k));
                bin(grads, b, &|k| val(a, k));
            }
            Op::Min(a, b) => {
                let (a, b) = (*a, *b);
                // Ties route the gradient to the first argument.
                bin(grads, a, &|k| if val(a, k) <= val(b, k) { 1.0 } else { 0.0 });
                bin(grads, b, &|k| if val(a, k) <= val(b, k) { 0.0 } else { 1.0 });
            }
            Op::Unary(kind, x) => {
                let x = *x;
                let xs = &nodes[x].value.data;
                accumulate(&mut grads[x], xs.len(), |buf| {
                    for k in 0..xs.len() {
                        let d = match kind {
                            Unary::Neg => -1.0,
                            Unary::Tanh => 1.0 - y[k] * y[k],
                            Unary::Exp => y[k],
                            Unary::Log => 1.0 / xs[k],
                            Unary::Sqrt => 0.5 / y[k],
                            Unary::Square => 2.0 * xs[k],
                            Unary::Softplus => 1.0 / (1.0 + (-xs[k]).exp()),
                            Unary::Asinh => 1.0 / (1.0 + xs[k] * xs[k]).sqrt(),
                        };
                        buf[k] += g[k] * d;
                    }
                });
            }
            Op::Scale(x, s) => {
                let s = *s;
                accumulate(&mut grads[*x], g.len(), |buf| {
                    for (b, gk) in buf.iter_mut().zip(g) {
                        *b += gk * s;
                    }
                });
            }
            Op::AddScalar(x) | Op::AddConst(x) | Op::Reshape(x) => {
                accumulate(&mut grads[*x], g.len(), |buf| {
                    for (b, gk) in buf.iter_mut().zip(g) {
                        *b += gk;
                    }
                });
            }
            Op::MulConst(x, c) => {
                accumulate(&mut grads[*x], g.len(), |buf| {
                    for k in 0..g.len() {
                        buf[k] += g[k] * c[k];
                    }
                });
            }
            Op::Clip(x, lo, hi) => {
                let xs = &nodes[*x].value.data;
                accumulate(&mut grads[*x], g.len(), |buf| {
                    for k in 0..g.len() {
                        if xs[k] > *lo && xs[k] < *hi {
                            buf[k] += g[k];
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, kk) = (nodes[a].value.shape[0], nodes[a].value.shape[1]);
                let n = nodes[b].value.shape[1];
                if wants(a) {
                    let bd = &nodes[b].value.data;
                    accumulate(&mut grads[a], m * kk, |buf| matmul_nt_acc(g, bd, m, n, kk, buf));
                }
                if wants(b) {
                    let ad = &nodes[a].value.data;
                    accumulate(&mut grads[b], kk * n, |buf| matmul_tn_acc(ad, g, m, kk, n, buf));
                }
            }
            Op::Bmm(a, b) => {
                let (a, b) = (*a, *b);
                let sa = &nodes[a].value.shape;
                let (batch, p, q) = (sa[0], sa[1], sa[2]);
                let r = nodes[b].value.shape[2];
                let ad = &nodes[a].value.data;
                let bd = &nodes[b].value.data;
                if wants(a) {
                    accumulate(&mut grads[a], batch * p * q, |buf| {
                        for e in 0..batch {
                            matmul_nt_acc(
                                &g[e * p * r..(e + 1) * p * r],
                                &bd[e * q * r..(e + 1) * q * r],
                                p,
                                r,
                                q,
                                &mut buf[e * p * q..(e + 1) * p * q],
                            );
                        }
                    });
                }
                if wants(b) {
                    accumulate(&mut grads[b], batch * q * r, |buf| {
                        for e in 0..batch {
                            matmul_tn_acc(
                                &ad[e * p * q..(e + 1) * p * q],
                                &g[e * p * r..(e + 1) * p * r],
                                p,
                                q,
                                r,
                                &mut buf[e * q * r..(e + 1) * q * r],
                            );
                        }
                    });
                }
            }
            Op::AddRow(x, bias) => {
                if wants(*x) {
                    accumulate(&mut grads[*x], g.len(), |buf| add_into(buf, g));
                }
                if wants(*bias) {
                    let w = len_of(*bias);
                    accumulate(&mut grads[*bias], w, |buf| {
                        for row in g.chunks_exact(w) {
                            add_into(buf, row);
                        }
                    });
                }
            }
            Op::ScaleRows(x, w) => {
                let width = g.len() / w.len().max(1);
                accumulate(&mut grads[*x], g.len(), |buf| {
                    for (r, wr) in w.iter().enumerate() {
                        for k in r * width..(r + 1) * width {
                            buf[k] += g[k] * wr;
                        }
                    }
                });
            }
            Op::Reduce {
                input,
                outer,
                len,
                inner,
                mean,
            } => {
                let scale = if *mean { 1.0 / *len as f64 } else { 1.0 };
                let (outer, len, inner) = (*outer, *len, *inner);
                accumulate(&mut grads[*input], outer * len * inner, |buf| {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                buf[(o * len + l) * inner + i] += g[o * inner + i] * scale;
                            }
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|&p| *nodes[p].value.shape.last().unwrap_or(&1))
                    .collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if wants(p) {
                        accumulate(&mut grads[p], rows * w, |buf| {
                            for r in 0..rows {
                                let src = &g[r * total + offset..r * total + offset + w];
                                add_into(&mut buf[r * w..(r + 1) * w], src);
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::GatherRows(x, idx) => {
                let width = nodes[*x].value.row_len();
                accumulate(&mut grads[*x], len_of(*x), |buf| {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(
                            &mut buf[src * width..(src + 1) * width],
                            &g[r * width..(r + 1) * width],
                        );
                    }
                });
            }
            Op::ScatterAdd(x, targets) => {
                let width = nodes[*x].value.row_len();
                accumulate(&mut grads[*x], len_of(*x), |buf| {
                    for (r, &t) in targets.iter().enumerate() {
                        add_into(
                            &mut buf[r * width..(r + 1) * width],
                            &g[t * width..(t + 1) * width],
                        );
                    }
                });
            }
            Op::SelectCols(x, idx) => {
                let width = *nodes[*x].value.shape.last().unwrap_or(&1);
                let rows = len_of(*x) / width.max(1);
                let out_w = idx.len();
                accumulate(&mut grads[*x], len_of(*x), |buf| {
                    for r in 0..rows {
                        for (c, &src) in idx.iter().enumerate() {
                            buf[r * width + src] += g[r * out_w + c];
                        }
                    }
                });
            }
            Op::TransposeLast2(x) => {
                let s = &nodes[*x].value.shape;
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = len_of(*x) / (r * c).max(1);
                // Output is [.., c, r]; transposing it back yields the input layout.
                let back = transpose_last2_raw(g, batch, c, r);
                accumulate(&mut grads[*x], back.len(), |buf| add_into(buf, &back));
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
fn matmul_nt_acc(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
fn matmul_tn_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            for (o, gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape.clone()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn backward(&self) -> Result<Gradients> {
        self.tape.backward(*self)
    }

    fn unary(&self, kind: Unary, f: impl Fn(f64) -> f64) -> Var<'t> {
        let out = {
            let v = self.value();
            Tensor {
                shape: v.shape.clone(),
                data: v.data.iter().map(|&x| f(x)).collect(),
            }
        };
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(out, Op::Unary(kind, self.id), rg)
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let b = other.value();
            if a.shape == b.shape {
                Tensor {
                    shape: a.shape.clone(),
                    data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
                }
            } else if b.rank() == 0 {
                let y = b.data[0];
                Tensor {
                    shape: a.shape.clone(),
                    data: a.data.iter().map(|&x| f(x, y)).collect(),
                }
            } else if a.rank() == 0 {
                let x = a.data[0];
                Tensor {
                    shape: b.shape.clone(),
                    data: b.data.iter().map(|&y| f(x, y)).collect(),
                }
            } else {
                return shape_err(name, &a.shape, &b.shape);
            }
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(out, op, rg))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// Elementwise minimum.
    pub fn min(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "min", f64::min, Op::Min(self.id, other.id))
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(Unary::Neg, |x| -x)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Unary::Tanh, f64::tanh)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Unary::Exp, f64::exp)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Unary::Square, |x| x * x)
    }

    pub fn softplus(&self) -> Var<'t> {
        self.unary(Unary::Softplus, |x| {
            if x > 30.0 {
                x
            } else {
                x.exp().ln_1p()
            }
        })
    }

    pub fn asinh(&self) -> Var<'t> {
        self.unary(Unary::Asinh, f64::asinh)
    }

    pub fn log(&self) -> Result<Var<'t>> {
        self.check_positive("log")?;
        Ok(self.unary(Unary::Log, f64::ln))
    }

    pub fn sqrt(&self) -> Result<Var<'t>> {
        self.check_positive("sqrt")?;
        Ok(self.unary(Unary::Sqrt, f64::sqrt))
    }

    fn check_positive(&self, op: &'static str) -> Result<()> {
        let v = self.value();
        match v.data.iter().find(|&&x| !(x > 0.0)) {
            Some(x) => Err(TensorError::Domain {
                op,
                detail: format!("nonpositive input {x}"),
            }),
            None => Ok(()),
        }
    }

    /// Clamp to `[lo, hi]`; gradient passes only strictly inside the interval.
    pub fn clip(&self, lo: f64, hi: f64) -> Var<'t> {
        let out = {
            let v = self.value();
            Tensor {
                shape: v.shape.clone(),
                data: v.data.iter().map(|&x| x.clamp(lo, hi)).collect(),
            }
        };
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(out, Op::Clip(self.id, lo, hi), rg)
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let out = {
            let v = self.value();
            Tensor {
                shape: v.shape.clone(),
                data: v.data.iter().map(|&x| x * s).collect(),
            }
        };
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(out, Op::Scale(self.id, s), rg)
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        let out = {
            let v = self.value();
            Tensor {
                shape: v.shape.clone(),
                data: v.data.iter().map(|&x| x + s).collect(),
            }
        };
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(out, Op::AddScalar(self.id), rg)
    }

    /// Adds a constant tensor of identical shape.
    pub fn add_const(&self, c: &Tensor) -> Result<Var<'t>> {
        let out = {
            let v = self.value();
            if v.shape != c.shape {
                return shape_err("add_const", &v.shape, &c.shape);
            }
            Tensor {
                shape: v.shape.clone(),
                data: v.data.iter().zip(&c.data).map(|(a, b)| a + b).collect(),
            }
        };
        let rg = self.tape.requires(&[self.id]);
        Ok(self.tape.push(out, Op::AddConst(self.id), rg))
    }

    /// Multiplies by a constant tensor of identical shape.
    pub fn mul_const(&self, c: &Tensor) -> Result<Var<'t>> {
        let out = {
            let v = self.value();
            if v.shape != c.shape {
                return shape_err("mul_const", &v.shape, &c.shape);
            }
            Tensor {
                shape: v.shape.clone(),
                data: v.data.iter().zip(&c.data).map(|(a, b)| a * b).collect(),
            }
        };
        let rg = self.tape.requires(&[self.id]);
        Ok(self.tape.push(out, Op::MulConst(self.id, c.data.clone()), rg))
    }

    /// `self[m×k] · other[k×n]`.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let b = other.value();
            if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
                return shape_err("matmul", &a.shape, &b.shape);
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            Tensor {
                shape: vec![m, n],
                data: matmul_raw(&a.data, &b.data, m, k, n),
            }
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id), rg))
    }

    /// Batched product `self[e×p×q] · other[e×q×r]`.
    pub fn bmm(&self, other: Var<'t>) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let b = other.value();
            if a.rank() != 3 || b.rank() != 3 || a.shape[0] != b.shape[0] || a.shape[2] != b.shape[1]
            {
                return shape_err("bmm", &a.shape, &b.shape);
            }
            let (e, p, q, r) = (a.shape[0], a.shape[1], a.shape[2], b.shape[2]);
            let mut data = vec![0.0; e * p * r];
            for i in 0..e {
                matmul_acc(
                    &a.data[i * p * q..(i + 1) * p * q],
                    &b.data[i * q * r..(i + 1) * q * r],
                    p,
                    q,
                    r,
                    &mut data[i * p * r..(i + 1) * p * r],
                );
            }
            Tensor {
                shape: vec![e, p, r],
                data,
            }
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(out, Op::Bmm(self.id, other.id), rg))
    }

    /// Adds `bias[n]` to every row of `self[m×n]`.
    pub fn add_row(&self, bias: Var<'t>) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let b = bias.value();
            let w = *x.shape.last().unwrap_or(&0);
            if x.rank() < 1 || b.rank() != 1 || b.shape[0] != w {
                return shape_err("add_row", &x.shape, &b.shape);
            }
            let mut data = x.data.clone();
            for row in data.chunks_exact_mut(w.max(1)) {
                add_into(row, &b.data);
            }
            Tensor {
                shape: x.shape.clone(),
                data,
            }
        };
        let rg = self.tape.requires(&[self.id, bias.id]);
        Ok(self.tape.push(out, Op::AddRow(self.id, bias.id), rg))
    }

    /// Multiplies row `r` (leading axis) by the constant `weights[r]`.
    pub fn scale_rows(&self, weights: &[f64]) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            if x.rows() != weights.len() || x.rank() == 0 {
                return shape_err("scale_rows", &x.shape, &[weights.len()]);
            }
            let w = x.row_len();
            let mut data = x.data.clone();
            for (row, s) in data.chunks_exact_mut(w.max(1)).zip(weights) {
                for v in row {
                    *v *= s;
                }
            }
            Tensor {
                shape: x.shape.clone(),
                data,
            }
        };
        let rg = self.tape.requires(&[self.id]);
        Ok(self.tape.push(out, Op::ScaleRows(self.id, weights.to_vec()), rg))
    }

    fn reduce(&self, axis: Option<usize>, mean: bool) -> Result<Var<'t>> {
        let name = if mean { "mean" } else { "sum" };
        let (out, outer, len, inner) = {
            let x = self.value();
            let (outer, len, inner, shape) = match axis {
                None => (1, x.len(), 1, Vec::new()),
                Some(a) if a < x.rank() => {
                    let (o, l, i) = reduce_split(&x.shape, a);
                    let mut s = x.shape.clone();
                    s.remove(a);
                    (o, l, i, s)
                }
                Some(a) => {
                    return Err(TensorError::Axis {
                        op: name,
                        axis: a,
                        rank: x.rank(),
                    })
                }
            };
            let scale = if mean && len > 0 { 1.0 / len as f64 } else { 1.0 };
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        data[o * inner + i] += x.data[(o * len + l) * inner + i];
                    }
                }
            }
            if mean {
                for v in &mut data {
                    *v *= scale;
                }
            }
            (Tensor { shape, data }, outer, len, inner)
        };
        let rg = self.tape.requires(&[self.id]);
        Ok(self.tape.push(
            out,
            Op::Reduce {
                input: self.id,
                outer,
                len,
                inner,
                mean,
            },
            rg,
        ))
    }

    /// Sum over `axis`, or over everything when `None`.
    pub fn sum(&self, axis: Option<usize>) -> Result<Var<'t>> {
        self.reduce(axis, false)
    }

    /// Mean over `axis`, or over everything when `None`.
    pub fn mean(&self, axis: Option<usize>) -> Result<Var<'t>> {
        self.reduce(axis, true)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().clone().reshaped(shape)?;
        let rg = self.tape.requires(&[self.id]);
        Ok(self.tape.push(out, Op::Reshape(self.id), rg))
    }

    /// Concatenates along the last axis; leading dimensions must agree.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let tape = parts.first().expect("concat of zero tensors").tape;
        let out = {
            let values: Vec<Ref<Tensor>> = parts.iter().map(|p| p.value()).collect();
            let lead = &values[0].shape[..values[0].rank() - 1];
            let rows: usize = lead.iter().product();
            for v in &values[1..] {
                if v.rank() != values[0].rank() || &v.shape[..v.rank() - 1] != lead {
                    return shape_err("concat", &values[0].shape, &v.shape);
                }
            }
            let widths: Vec<usize> = values.iter().map(|v| *v.shape.last().unwrap()).collect();
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (v, &w) in values.iter().zip(&widths) {
                    data.extend_from_slice(&v.data[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            Tensor { shape, data }
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.requires(&ids);
        Ok(tape.push(out, Op::Concat(ids), rg))
    }

    /// Selects rows of the leading axis by index (repetition allowed).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            if x.rank() == 0 {
                return shape_err("gather_rows", &x.shape, &[idx.len()]);
            }
            let w = x.row_len();
            let mut data = Vec::with_capacity(idx.len() * w);
            for &i in idx {
                if i >= x.rows() {
                    return Err(TensorError::Index {
                        op: "gather_rows",
                        index: i,
                        len: x.rows(),
                    });
                }
                data.extend_from_slice(&x.data[i * w..(i + 1) * w]);
            }
            let mut shape = x.shape.clone();
            shape[0] = idx.len();
            Tensor { shape, data }
        };
        let rg = self.tape.requires(&[self.id]);
        Ok(self.tape.push(out, Op::GatherRows(self.id, idx.to_vec()), rg))
    }

    /// Sums row `r` into output row `targets[r]`; output has `n` rows and
    /// untouched rows are zero.
    pub fn scatter_add(&self, targets: &[usize], n: usize) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            if x.rank() == 0 || x.rows() != targets.len() {
                return shape_err("scatter_add", &x.shape, &[targets.len()]);
            }
            let w = x.row_len();
            let mut data = vec![0.0; n * w];
            for (r, &t) in targets.iter().enumerate() {
                if t >= n {
                    return Err(TensorError::Index {
                        op: "scatter_add",
                        index: t,
                        len: n,
                    });
                }
                add_into(&mut data[t * w..(t + 1) * w], &x.data[r * w..(r + 1) * w]);
            }
            let mut shape = x.shape.clone();
            shape[0] = n;
            Tensor { shape, data }
        };
        let rg = self.tape.requires(&[self.id]);
        Ok(self.tape.push(out, Op::ScatterAdd(self.id, targets.to_vec()), rg))
    }

    /// Selects entries of the last axis by index.
    pub fn select_cols(&self, idx: &[usize]) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let w = *x.shape.last().unwrap_or(&0);
            if let Some(&bad) = idx.iter().find(|&&i| i >= w) {
                return Err(TensorError::Index {
                    op: "select_cols",
                    index: bad,
                    len: w,
                });
            }
            let rows = x.len() / w.max(1);
            let mut data = Vec::with_capacity(rows * idx.len());
            for r in 0..rows {
                data.extend(idx.iter().map(|&i| x.data[r * w + i]));
            }
            let mut shape = x.shape.clone();
            *shape.last_mut().unwrap() = idx.len();
            Tensor { shape, data }
        };
        let rg = self.tape.requires(&[self.id]);
        Ok(self.tape.push(out, Op::SelectCols(self.id, idx.to_vec()), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            if x.rank() < 2 {
                return shape_err("transpose_last2", &x.shape, &[]);
            }
            let k = x.rank();
            let (r, c) = (x.shape[k - 2], x.shape[k - 1]);
            let batch = x.len() / (r * c).max(1);
            let mut shape = x.shape.clone();
            shape.swap(k - 2, k - 1);
            Tensor {
                shape,
                data: transpose_last2_raw(&x.data, batch, r, c),
            }
        };
        let rg = self.tape.requires(&[self.id]);
        Ok(self.tape.push(out, Op::TransposeLast2(self.id), rg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn t2(rows: usize, cols: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, d.to_vec()).unwrap()
    }

    /// Central differences of `f` around `x0`, step 1e-6.
    fn finite_diff(x0: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x0.len())
            .map(|k| {
                let mut plus = x0.clone();
                let mut minus = x0.clone();
                plus.data_mut()[k] += h;
                minus.data_mut()[k] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let tape = Tape::new();
        let i2 = tape.constant(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let z = tape.constant(Tensor::zeros(&[2, 2]));
        assert_eq!(i2.matmul(a).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(a.matmul(z).unwrap().value().data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let b = t2(2, 1, &[2.0, 3.0]);
        let a0 = t2(1, 2, &[1.0, 1.0]);
        let tape = Tape::new();
        let a = tape.param(a0.clone());
        let bv = tape.constant(b.clone());
        let loss = a.matmul(bv).unwrap().sum(None).unwrap();
        let g = loss.backward().unwrap().wrt(a);
        // Frozen from the finite-difference oracle: [[2, 3]].
        let fd = finite_diff(&a0, |x| {
            let t = Tape::new();
            let l = t.constant(x.clone()).matmul(t.constant(b.clone())).unwrap();
            l.sum(None).unwrap().item()
        });
        assert_relative_eq!(fd[0], 2.0, epsilon = 1e-8);
        assert_relative_eq!(fd[1], 3.0, epsilon = 1e-8);
        assert_eq!(g.data(), &[2.0, 3.0]);
    }

    #[test]
    fn tanh_at_origin() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        let y = x.tanh();
        assert_eq!(y.item(), 0.0);
        assert_eq!(y.backward().unwrap().wrt(x).item(), 1.0);
    }

    #[test]
    fn clip_above_range_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.5));
        let y = x.clip(0.8, 1.2);
        assert_eq!(y.item(), 1.2);
        assert_eq!(y.backward().unwrap().wrt(x).item(), 0.0);
    }

    #[test]
    fn clip_boundary_tie_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.2));
        let y = x.clip(0.8, 1.2);
        assert_eq!(y.backward().unwrap().wrt(x).item(), 0.0);
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.0));
        assert_eq!(x.clip(0.8, 1.2).backward().unwrap().wrt(x).item(), 1.0);
    }

    #[test]
    fn min_picks_smaller() {
        let tape = Tape::new();
        let a = tape.param(Tensor::scalar(-0.5));
        let b = tape.param(Tensor::scalar(-0.8));
        let m = a.min(b).unwrap();
        assert_eq!(m.item(), -0.8);
        let g = m.backward().unwrap();
        assert_eq!(g.wrt(a).item(), 0.0);
        assert_eq!(g.wrt(b).item(), 1.0);
    }

    #[test]
    fn log_rejects_nonpositive() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(x.log(), Err(TensorError::Domain { op: "log", .. })));
        assert!(x.sqrt().is_err());
    }

    #[test]
    fn binary_shape_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        assert!(a.add(b).is_err());
        // scalar-with-tensor is allowed
        let s = tape.constant(Tensor::scalar(2.0));
        assert_eq!(a.add(s).unwrap().value().data(), &[2.0, 2.0]);
    }

    #[test]
    fn reductions() {
        let tape = Tape::new();
        let v = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert_eq!(v.sum(None).unwrap().item(), 6.0);

        let m = tape.param(Tensor::vector(vec![2.0, 4.0]));
        let mean = m.mean(None).unwrap();
        assert_eq!(mean.item(), 3.0);
        assert_eq!(mean.backward().unwrap().wrt(m).data(), &[0.5, 0.5]);

        let a = tape.param(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let s0 = a.sum(Some(0)).unwrap();
        assert_eq!(s0.value().data(), &[4.0, 6.0]);
        assert_eq!(s0.shape(), vec![2]);
        assert!(matches!(a.sum(Some(2)), Err(TensorError::Axis { .. })));
    }

    #[test]
    fn scatter_add_examples() {
        let tape = Tape::new();
        let m = tape.param(t2(3, 1, &[1.0, 2.0, 3.0]));
        let out = m.scatter_add(&[0, 0, 1], 3).unwrap();
        assert_eq!(out.value().data(), &[3.0, 3.0, 0.0]);

        let empty = tape.constant(Tensor::zeros(&[0, 1]));
        assert_eq!(empty.scatter_add(&[], 2).unwrap().value().data(), &[0.0, 0.0]);

        assert!(matches!(
            m.scatter_add(&[0, 5, 1], 3),
            Err(TensorError::Index { index: 5, .. })
        ));
    }

    #[test]
    fn scatter_add_gradient_is_gather() {
        let w = t2(3, 1, &[0.3, -1.0, 2.0]);
        let x0 = t2(3, 1, &[1.0, 2.0, 3.0]);
        let targets = [0, 0, 1];
        let run = |x: &Tensor| {
            let tape = Tape::new();
            let v = tape.param(x.clone());
            let out = v.scatter_add(&targets, 3).unwrap();
            let loss = out.mul_const(&w).unwrap().square().sum(None).unwrap();
            (loss.item(), loss.backward().unwrap().wrt(v))
        };
        let (_, g) = run(&x0);
        let fd = finite_diff(&x0, |x| run(x).0);
        for (a, b) in g.data().iter().zip(&fd) {
            assert_relative_eq!(*a, *b, max_relative = 1e-6);
        }
    }

    #[test]
    fn square_gradient_and_unused_param() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let unused = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let loss = x.square();
        let g = loss.backward().unwrap();
        assert_eq!(g.wrt(x).item(), 6.0);
        assert_eq!(g.wrt(unused).data(), &[0.0, 0.0]);
        assert!(g.get(unused).is_none());
    }

    #[test]
    fn fan_out_accumulates() {
        // f(x) = x^2 + tanh(x)
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.7));
        let loss = x.square().add(x.tanh()).unwrap();
        let g = loss.backward().unwrap().wrt(x).item();
        let expected = 2.0 * 0.7 + (1.0 - 0.7f64.tanh().powi(2));
        assert_eq!(g, expected);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(x.backward(), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn structural_ops_gradients() {
        let x0 = Tensor::new(vec![2, 2, 3], (0..12).map(|k| 0.1 * k as f64 - 0.4).collect()).unwrap();
        let y0 = Tensor::new(vec![2, 3, 2], (0..12).map(|k| 0.05 * k as f64 + 0.2).collect()).unwrap();
        let run = |x: &Tensor| {
            let tape = Tape::new();
            let xv = tape.param(x.clone());
            let yv = tape.param(y0.clone());
            let xt = xv.transpose_last2().unwrap(); // [2,3,2]
            let cat = Var::concat(&[xt, yv]).unwrap(); // [2,3,4]
            let sel = cat.select_cols(&[0, 3, 1]).unwrap(); // [2,3,3]
            let prod = sel.bmm(xv.transpose_last2().unwrap().transpose_last2().unwrap().reshape(&[2, 2, 3]).unwrap().transpose_last2().unwrap().transpose_last2().unwrap().transpose_last2().unwrap()).unwrap(); // [2,3,2]
            let flat = prod.reshape(&[6, 2]).unwrap();
            let g = flat.gather_rows(&[5, 0, 0, 2]).unwrap().scale_rows(&[1.0, -2.0, 0.5, 3.0]).unwrap();
            let loss = g.asinh().softplus().sum(None).unwrap();
            (loss.item(), loss.backward().unwrap().wrt(xv))
        };
        let (_, g) = run(&x0);
        let fd = finite_diff(&x0, |x| run(x).0);
        for (a, b) in g.data().iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
}
