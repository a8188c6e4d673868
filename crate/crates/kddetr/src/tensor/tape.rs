use std::cell::RefCell;

use super::{Param, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Cheap to copy; only valid for the tape
/// that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine { x: Var, mul: f64 },
    Relu(Var),
    Abs(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softmax { x: Var, temp: f64 },
    LogSoftmax { x: Var, temp: f64 },
    LayerNorm { x: Var, gamma: Var, beta: Var },
    MatMul(Var, Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    SelectRows { x: Var, indices: Vec<usize> },
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    backing: Option<Param>,
}

/// Reverse-mode differentiation tape. A fresh graph is recorded on every
/// forward pass; nodes are appended in construction order, so every input id
/// precedes its consumer and the backward sweep is a single reverse scan.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// `rhs` broadcasts into `lhs` when its shape is a trailing suffix of
/// `lhs`'s shape. Returns the number of leading-axis repeats.
fn broadcast_repeat(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<usize> {
    if lhs == rhs {
        return Ok(1);
    }
    if rhs.len() < lhs.len() && lhs.ends_with(rhs) {
        let rep: usize = lhs[..lhs.len() - rhs.len()].iter().product();
        return Ok(rep);
    }
    Err(Error::dim(op, lhs, rhs))
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, value: Tensor, needs_grad: bool, backing: Option<Param>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            grad: None,
            needs_grad,
            backing,
        });
        Var(nodes.len() - 1)
    }

    /// Non-trainable input. Gradients never flow into it.
    pub fn constant(&self, tensor: Tensor) -> Var {
        self.push(Op::Leaf, tensor, false, None)
    }

    pub fn constant_from(&self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        Ok(self.constant(Tensor::new(shape, values)?))
    }

    /// Standalone differentiable leaf; its gradient stays on the tape.
    pub fn leaf(&self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = true;
        self.push(Op::Leaf, tensor, true, None)
    }

    /// Binds a shared parameter: copies its current values in and, on
    /// `backward`, accumulates the leaf gradient back into the parameter.
    pub fn param(&self, p: &Param) -> Var {
        let snap = p.snapshot();
        self.push(Op::Leaf, snap, true, Some(p.clone()))
    }

    // ── accessors ──────────────────────────────────────────────────────

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn values_of(&self, v: Var) -> Vec<f64> {
        self.nodes.borrow()[v.0].value.values().to_vec()
    }

    /// Detached copy of a node's value.
    pub fn tensor_of(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        let mut t = nodes[v.0].value.clone();
        t.requires_grad = false;
        t.grad = None;
        t
    }

    pub fn scalar_of(&self, v: Var) -> Result<f64> {
        let nodes = self.nodes.borrow();
        let t = &nodes[v.0].value;
        if !t.is_scalar() {
            return Err(Error::Contract(format!(
                "expected scalar, got shape {:?}",
                t.shape()
            )));
        }
        Ok(t.values()[0])
    }

    pub fn grad_of(&self, v: Var) -> Option<Vec<f64>> {
        self.nodes.borrow()[v.0].grad.clone()
    }

    // ── elementwise / broadcast ────────────────────────────────────────

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let rep = broadcast_repeat(name, ta.shape(), tb.shape())?;
            let rn = tb.numel();
            let mut out = Vec::with_capacity(ta.numel());
            let av = ta.values();
            let bv = tb.values();
            for block in 0..rep {
                for j in 0..rn {
                    out.push(f(av[block * rn + j], bv[j]));
                }
            }
            (
                Tensor::new(ta.shape().to_vec(), out)?,
                nodes[a.0].needs_grad || nodes[b.0].needs_grad,
            )
        };
        Ok(self.push(op, value, needs, None))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let out: Vec<f64> = t.values().iter().map(|&v| f(v)).collect();
            (
                Tensor {
                    shape: t.shape().to_vec(),
                    values: out,
                    requires_grad: false,
                    grad: None,
                },
                nodes[x.0].needs_grad,
            )
        };
        self.push(op, value, needs, None)
    }

    /// `mul * x + add`, elementwise with scalar coefficients.
    pub fn affine(&self, x: Var, mul: f64, add: f64) -> Var {
        self.unary(x, |v| mul * v + add, Op::Affine { x, mul })
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn abs(&self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        {
            let nodes = self.nodes.borrow();
            if let Some(v) = nodes[x.0].value.values().iter().find(|v| **v <= 0.0) {
                return Err(Error::Domain(format!("log of non-positive value {v}")));
            }
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    // ── row-wise ops (last axis) ───────────────────────────────────────

    /// Softmax of `x / temperature` along the last axis, stabilized by
    /// max-subtraction.
    pub fn softmax(&self, x: Var, temperature: f64) -> Result<Var> {
        if temperature <= 0.0 {
            return Err(Error::Param(format!(
                "softmax temperature must be > 0, got {temperature}"
            )));
        }
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let n = t.last_dim();
            let rows = t.numel() / n;
            let mut out = vec![0.0; t.numel()];
            for r in 0..rows {
                let row = &t.values()[r * n..(r + 1) * n];
                let orow = &mut out[r * n..(r + 1) * n];
                softmax_row(row, temperature, orow);
            }
            (
                Tensor::new(t.shape().to_vec(), out)?,
                nodes[x.0].needs_grad,
            )
        };
        Ok(self.push(Op::Softmax { x, temp: temperature }, value, needs, None))
    }

    /// `x/T - logsumexp(x/T)` along the last axis; never produces -inf for
    /// finite inputs, which makes it the right primitive for CE/KL losses.
    pub fn log_softmax(&self, x: Var, temperature: f64) -> Result<Var> {
        if temperature <= 0.0 {
            return Err(Error::Param(format!(
                "log_softmax temperature must be > 0, got {temperature}"
            )));
        }
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let n = t.last_dim();
            let rows = t.numel() / n;
            let mut out = vec![0.0; t.numel()];
            for r in 0..rows {
                let row = &t.values()[r * n..(r + 1) * n];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m / temperature
                    + row
                        .iter()
                        .map(|&v| ((v - m) / temperature).exp())
                        .sum::<f64>()
                        .ln();
                for (o, &v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                    *o = v / temperature - lse;
                }
            }
            (
                Tensor::new(t.shape().to_vec(), out)?,
                nodes[x.0].needs_grad,
            )
        };
        Ok(self.push(Op::LogSoftmax { x, temp: temperature }, value, needs, None))
    }

    /// Layer normalization over the last axis with learnable scale and shift.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let g = &nodes[gamma.0].value;
            let b = &nodes[beta.0].value;
            let n = t.last_dim();
            if g.numel() != n || b.numel() != n {
                return Err(Error::dim("layer_norm", t.shape(), g.shape()));
            }
            let rows = t.numel() / n;
            let mut out = vec![0.0; t.numel()];
            for r in 0..rows {
                let row = &t.values()[r * n..(r + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + EPS).sqrt();
                for j in 0..n {
                    out[r * n + j] = (row[j] - mean) * inv * g.values()[j] + b.values()[j];
                }
            }
            (
                Tensor::new(t.shape().to_vec(), out)?,
                nodes[x.0].needs_grad || nodes[gamma.0].needs_grad || nodes[beta.0].needs_grad,
            )
        };
        Ok(self.push(Op::LayerNorm { x, gamma, beta }, value, needs, None))
    }

    // ── matrix ops ─────────────────────────────────────────────────────

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
                return Err(Error::dim("matmul", ta.shape(), tb.shape()));
            }
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            let out = matmul_raw(ta.values(), tb.values(), m, k, n);
            (
                Tensor::new(vec![m, n], out)?,
                nodes[a.0].needs_grad || nodes[b.0].needs_grad,
            )
        };
        Ok(self.push(Op::MatMul(a, b), value, needs, None))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if t.shape().len() != 2 {
                return Err(Error::dim("transpose", t.shape(), &[]));
            }
            let (m, n) = (t.shape()[0], t.shape()[1]);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = t.values()[i * n + j];
                }
            }
            (Tensor::new(vec![n, m], out)?, nodes[x.0].needs_grad)
        };
        Ok(self.push(Op::Transpose(x), value, needs, None))
    }

    // ── reductions ─────────────────────────────────────────────────────

    pub fn sum(&self, x: Var) -> Var {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            (
                Tensor::scalar(t.values().iter().sum()),
                nodes[x.0].needs_grad,
            )
        };
        self.push(Op::Sum(x), value, needs, None)
    }

    pub fn mean(&self, x: Var) -> Var {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            (
                Tensor::scalar(t.values().iter().sum::<f64>() / t.numel() as f64),
                nodes[x.0].needs_grad,
            )
        };
        self.push(Op::Mean(x), value, needs, None)
    }

    /// Gathers rows of a 2-D tensor; duplicate indices are legal and their
    /// gradients accumulate.
    pub fn select_rows(&self, x: Var, indices: &[usize]) -> Result<Var> {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if t.shape().len() != 2 {
                return Err(Error::dim("select_rows", t.shape(), &[]));
            }
            if indices.is_empty() {
                return Err(Error::Contract("select_rows with no indices".into()));
            }
            let (m, n) = (t.shape()[0], t.shape()[1]);
            let mut out = Vec::with_capacity(indices.len() * n);
            for &i in indices {
                if i >= m {
                    return Err(Error::Contract(format!(
                        "select_rows index {i} out of range for {m} rows"
                    )));
                }
                out.extend_from_slice(&t.values()[i * n..(i + 1) * n]);
            }
            (
                Tensor::new(vec![indices.len(), n], out)?,
                nodes[x.0].needs_grad,
            )
        };
        Ok(self.push(
            Op::SelectRows {
                x,
                indices: indices.to_vec(),
            },
            value,
            needs,
            None,
        ))
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Populates gradients for every grad-requiring node reachable from
    /// `loss`, visiting nodes in exact reverse construction order, then
    /// accumulates leaf gradients into their backing parameters.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if loss.0 >= nodes.len() {
            return Err(Error::Contract("loss is not on this tape".into()));
        }
        if !nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        if nodes[loss.0].needs_grad {
            nodes[loss.0].grad = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            if !nodes[i].needs_grad || nodes[i].grad.is_none() {
                continue;
            }
            let (left, right) = nodes.split_at_mut(i);
            let node = &right[0];
            let g = node.grad.as_ref().unwrap();
            step_backward(node, g, left);
        }
        for node in nodes.iter() {
            if let (Some(p), Some(g)) = (&node.backing, &node.grad) {
                p.accumulate_grad(g);
            }
        }
        Ok(())
    }
}

fn softmax_row(row: &[f64], temperature: f64, out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = ((v - m) / temperature).exp();
        *o = e;
        denom += e;
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
}

fn accumulate(left: &mut [Node], id: usize, delta: &[f64]) {
    if !left[id].needs_grad {
        return;
    }
    let n = left[id].value.numel();
    let g = left[id].grad.get_or_insert_with(|| vec![0.0; n]);
    for (gi, di) in g.iter_mut().zip(delta) {
        *gi += di;
    }
}

/// Reduces `delta` (shaped like the op output) onto the possibly-broadcast
/// input `id`, folding leading axes when the input was expanded.
fn accumulate_folded(left: &mut [Node], id: usize, delta: &[f64]) {
    if !left[id].needs_grad {
        return;
    }
    let rn = left[id].value.numel();
    if rn == delta.len() {
        accumulate(left, id, delta);
        return;
    }
    let mut folded = vec![0.0; rn];
    for (block_i, chunk) in delta.chunks_exact(rn).enumerate() {
        let _ = block_i;
        for (f, d) in folded.iter_mut().zip(chunk) {
            *f += d;
        }
    }
    accumulate(left, id, &folded);
}

fn step_backward(node: &Node, g: &[f64], left: &mut [Node]) {
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(left, a.0, g);
            accumulate_folded(left, b.0, g);
        }
        Op::Sub(a, b) => {
            accumulate(left, a.0, g);
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            accumulate_folded(left, b.0, &neg);
        }
        Op::Mul(a, b) => {
            let rn = left[b.0].value.numel();
            if left[a.0].needs_grad {
                let bv = left[b.0].value.values();
                let da: Vec<f64> = g.iter().enumerate().map(|(i, &gi)| gi * bv[i % rn]).collect();
                accumulate(left, a.0, &da);
            }
            if left[b.0].needs_grad {
                let av = left[a.0].value.values();
                let db: Vec<f64> = g.iter().zip(av).map(|(&gi, &ai)| gi * ai).collect();
                accumulate_folded(left, b.0, &db);
            }
        }
        Op::Div(a, b) => {
            let rn = left[b.0].value.numel();
            if left[a.0].needs_grad {
                let bv = left[b.0].value.values();
                let da: Vec<f64> = g.iter().enumerate().map(|(i, &gi)| gi / bv[i % rn]).collect();
                accumulate(left, a.0, &da);
            }
            if left[b.0].needs_grad {
                let av = left[a.0].value.values();
                let bv = left[b.0].value.values();
                let db: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| {
                        let bb = bv[i % rn];
                        -gi * av[i] / (bb * bb)
                    })
                    .collect();
                accumulate_folded(left, b.0, &db);
            }
        }
        Op::Affine { x, mul } => {
            let dx: Vec<f64> = g.iter().map(|&gi| gi * mul).collect();
            accumulate(left, x.0, &dx);
        }
        Op::Relu(x) => {
            let xv = left[x.0].value.values();
            let dx: Vec<f64> = g
                .iter()
                .zip(xv)
                .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                .collect();
            accumulate(left, x.0, &dx);
        }
        Op::Abs(x) => {
            let xv = left[x.0].value.values();
            let dx: Vec<f64> = g
                .iter()
                .zip(xv)
                .map(|(&gi, &xi)| gi * if xi > 0.0 { 1.0 } else if xi < 0.0 { -1.0 } else { 0.0 })
                .collect();
            accumulate(left, x.0, &dx);
        }
        Op::Sigmoid(x) => {
            let yv = node.value.values();
            let dx: Vec<f64> = g.iter().zip(yv).map(|(&gi, &y)| gi * y * (1.0 - y)).collect();
            accumulate(left, x.0, &dx);
        }
        Op::Exp(x) => {
            let yv = node.value.values();
            let dx: Vec<f64> = g.iter().zip(yv).map(|(&gi, &y)| gi * y).collect();
            accumulate(left, x.0, &dx);
        }
        Op::Log(x) => {
            let xv = left[x.0].value.values();
            let dx: Vec<f64> = g.iter().zip(xv).map(|(&gi, &xi)| gi / xi).collect();
            accumulate(left, x.0, &dx);
        }
        Op::Softmax { x, temp } => {
            let y = node.value.values();
            let n = node.value.last_dim();
            let rows = y.len() / n;
            let mut dx = vec![0.0; y.len()];
            for r in 0..rows {
                let ys = &y[r * n..(r + 1) * n];
                let gs = &g[r * n..(r + 1) * n];
                let dot: f64 = ys.iter().zip(gs).map(|(&yi, &gi)| yi * gi).sum();
                for j in 0..n {
                    dx[r * n + j] = ys[j] * (gs[j] - dot) / temp;
                }
            }
            accumulate(left, x.0, &dx);
        }
        Op::LogSoftmax { x, temp } => {
            let y = node.value.values();
            let n = node.value.last_dim();
            let rows = y.len() / n;
            let mut dx = vec![0.0; y.len()];
            for r in 0..rows {
                let ys = &y[r * n..(r + 1) * n];
                let gs = &g[r * n..(r + 1) * n];
                let gsum: f64 = gs.iter().sum();
                for j in 0..n {
                    dx[r * n + j] = (gs[j] - ys[j].exp() * gsum) / temp;
                }
            }
            accumulate(left, x.0, &dx);
        }
        Op::LayerNorm { x, gamma, beta } => {
            const EPS: f64 = 1e-5;
            let xv = left[x.0].value.values().to_vec();
            let gv = left[gamma.0].value.values().to_vec();
            let n = node.value.last_dim();
            let rows = xv.len() / n;
            let mut dx = vec![0.0; xv.len()];
            let mut dgamma = vec![0.0; n];
            let mut dbeta = vec![0.0; n];
            for r in 0..rows {
                let row = &xv[r * n..(r + 1) * n];
                let gs = &g[r * n..(r + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + EPS).sqrt();
                let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                let gxh: Vec<f64> = gs.iter().zip(&gv).map(|(&gi, &gm)| gi * gm).collect();
                let m1 = gxh.iter().sum::<f64>() / n as f64;
                let m2 = gxh.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<f64>() / n as f64;
                for j in 0..n {
                    dx[r * n + j] = (gxh[j] - m1 - xhat[j] * m2) * inv;
                    dgamma[j] += gs[j] * xhat[j];
                    dbeta[j] += gs[j];
                }
            }
            accumulate(left, x.0, &dx);
            accumulate(left, gamma.0, &dgamma);
            accumulate(left, beta.0, &dbeta);
        }
        Op::MatMul(a, b) => {
            let (m, k) = {
                let s = left[a.0].value.shape();
                (s[0], s[1])
            };
            let n = left[b.0].value.shape()[1];
            if left[a.0].needs_grad {
                // dA = dC · B^T
                let bv = left[b.0].value.values();
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv[p * n..(p + 1) * n];
                        let mut acc = 0.0;
                        for (gj, bj) in grow.iter().zip(brow) {
                            acc += gj * bj;
                        }
                        da[i * k + p] = acc;
                    }
                }
                accumulate(left, a.0, &da);
            }
            if left[b.0].needs_grad {
                // dB = A^T · dC
                let av = left[a.0].value.values();
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = av[i * k + p];
                        let drow = &mut db[p * n..(p + 1) * n];
                        for (d, gj) in drow.iter_mut().zip(grow) {
                            *d += aip * gj;
                        }
                    }
                }
                accumulate(left, b.0, &db);
            }
        }
        Op::Transpose(x) => {
            let (n, m) = {
                let s = node.value.shape();
                (s[0], s[1])
            };
            let mut dx = vec![0.0; n * m];
            for i in 0..n {
                for j in 0..m {
                    dx[j * n + i] = g[i * m + j];
                }
            }
            accumulate(left, x.0, &dx);
        }
        Op::Sum(x) => {
            let dx = vec![g[0]; left[x.0].value.numel()];
            accumulate(left, x.0, &dx);
        }
        Op::Mean(x) => {
            let n = left[x.0].value.numel();
            let dx = vec![g[0] / n as f64; n];
            accumulate(left, x.0, &dx);
        }
        Op::SelectRows { x, indices } => {
            let n = node.value.last_dim();
            let mut dx = vec![0.0; left[x.0].value.numel()];
            for (r, &i) in indices.iter().enumerate() {
                for j in 0..n {
                    dx[i * n + j] += g[r * n + j];
                }
            }
            accumulate(left, x.0, &dx);
        }
    }
}
