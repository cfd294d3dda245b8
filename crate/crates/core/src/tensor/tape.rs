use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;
use std::sync::Arc;

use super::kernels;
use super::{Tensor, MASK_NEG};
use crate::error::{dim_err, Error, Result};

/// Index value in a [`Var::gather`] map that produces a zero.
pub const GATHER_ZERO: usize = usize::MAX;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    Softmax {
        input: usize,
        fallback: Vec<bool>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Transpose(usize),
    ConcatRows(Vec<usize>),
    NarrowRows {
        input: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    NarrowCols {
        input: usize,
        start: usize,
    },
    Gather {
        input: usize,
        index: Arc<[usize]>,
    },
    Reshape(usize),
    Sum(usize),
    SumLast(usize),
    MaxRows {
        input: usize,
        argmax: Vec<usize>,
    },
    Bce {
        logits: usize,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records executed operations in creation order, which is a topological
/// order by construction.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
    grad_enabled: bool,
    backward_done: Cell<bool>,
    live_bytes: Cell<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            grad_enabled: true,
            backward_done: Cell::new(false),
            live_bytes: Cell::new(0),
        }
    }

    /// A tape that records values only; nothing on it requires a gradient.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bytes held by all recorded values. Nothing is freed before the tape is
    /// dropped, so this is also the peak.
    pub fn live_bytes(&self) -> usize {
        self.live_bytes.get()
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let rg = requires_grad && self.grad_enabled;
        self.push(value, Op::Leaf, rg)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        self.live_bytes.set(self.live_bytes.get() + value.size_bytes());
        let mut nodes = self.nodes.borrow_mut();
        // Ops whose inputs need no gradient are stored as leaves.
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Gradient of the last `backward` call's loss with respect to `var`.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads.get(var.id)?.as_ref()?;
        let shape = self.nodes.borrow()[var.id].value.shape().to_vec();
        Some(Tensor::new(shape, g.clone()).expect("gradient shape"))
    }

    /// Populates gradients for every leaf that requires one. May run once per
    /// tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to another tape".into()));
        }
        if self.backward_done.get() {
            return Err(Error::Contract(
                "backward already ran on this tape; re-run the forward pass".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        if !nodes[loss.id].requires_grad {
            return Err(Error::Contract("loss does not depend on any parameter".into()));
        }
        self.backward_done.set(true);

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
        }
        for (id, node) in nodes.iter().enumerate().take(loss.id + 1) {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                grads[id] = None;
            }
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]);
    f(slot);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (m, k) = val(a).dims2().unwrap();
            let p = val(b).shape()[1];
            accumulate(grads, nodes, a, |ga| {
                kernels::matmul_nt_acc(g, val(b).data(), ga, m, p, k);
            });
            accumulate(grads, nodes, b, |gb| {
                kernels::matmul_tn_acc(val(a).data(), g, gb, m, k, p);
            });
        }
        &Op::MatMulNt(a, b) => {
            // out = a · bᵀ, a: m×k, b: p×k
            let (m, k) = val(a).dims2().unwrap();
            let p = val(b).shape()[0];
            accumulate(grads, nodes, a, |ga| {
                kernels::matmul_acc(g, val(b).data(), ga, m, p, k);
            });
            accumulate(grads, nodes, b, |gb| {
                kernels::matmul_tn_acc(g, val(a).data(), gb, m, p, k);
            });
        }
        &Op::Add(a, b) => {
            accumulate(grads, nodes, a, |ga| add_into(ga, g));
            accumulate(grads, nodes, b, |gb| add_into(gb, g));
        }
        &Op::Sub(a, b) => {
            accumulate(grads, nodes, a, |ga| add_into(ga, g));
            accumulate(grads, nodes, b, |gb| {
                for (d, s) in gb.iter_mut().zip(g) {
                    *d -= s;
                }
            });
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            accumulate(grads, nodes, a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * bv[i];
                }
            });
            accumulate(grads, nodes, b, |gb| {
                for i in 0..gb.len() {
                    gb[i] += g[i] * av[i];
                }
            });
        }
        &Op::Div(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            accumulate(grads, nodes, a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] / bv[i];
                }
            });
            accumulate(grads, nodes, b, |gb| {
                for i in 0..gb.len() {
                    gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                }
            });
        }
        &Op::AddRow(x, row) => {
            accumulate(grads, nodes, x, |gx| add_into(gx, g));
            let n = val(row).numel();
            accumulate(grads, nodes, row, |gr| {
                for chunk in g.chunks_exact(n) {
                    add_into(gr, chunk);
                }
            });
        }
        &Op::MulRow(x, row) => {
            let n = val(row).numel();
            let (xv, rv) = (val(x).data(), val(row).data());
            accumulate(grads, nodes, x, |gx| {
                for (i, gi) in gx.iter_mut().enumerate() {
                    *gi += g[i] * rv[i % n];
                }
            });
            accumulate(grads, nodes, row, |gr| {
                for (i, &gi) in g.iter().enumerate() {
                    gr[i % n] += gi * xv[i];
                }
            });
        }
        &Op::Scale(a, s) => {
            accumulate(grads, nodes, a, |ga| {
                for (d, &gi) in ga.iter_mut().zip(g) {
                    *d += s * gi;
                }
            });
        }
        &Op::AddScalar(a) => accumulate(grads, nodes, a, |ga| add_into(ga, g)),
        &Op::Relu(a) => {
            let av = val(a).data();
            accumulate(grads, nodes, a, |ga| {
                for i in 0..ga.len() {
                    if av[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            });
        }
        &Op::Gelu(a) => {
            let av = val(a).data();
            accumulate(grads, nodes, a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * gelu_grad(av[i]);
                }
            });
        }
        &Op::Sigmoid(a) => {
            let yv = out.data();
            accumulate(grads, nodes, a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * yv[i] * (1.0 - yv[i]);
                }
            });
        }
        Op::Softmax { input, fallback } => {
            let k = *out.shape().last().unwrap();
            let yv = out.data();
            accumulate(grads, nodes, *input, |ga| {
                for (r, &fb) in fallback.iter().enumerate() {
                    if fb {
                        continue;
                    }
                    let ys = &yv[r * k..(r + 1) * k];
                    let gs = &g[r * k..(r + 1) * k];
                    let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                    for j in 0..k {
                        ga[r * k + j] += ys[j] * (gs[j] - dot);
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let n = val(*gamma).numel();
            let gv = val(*gamma).data();
            accumulate(grads, nodes, *x, |gx| {
                for (r, &rs) in rstd.iter().enumerate() {
                    let off = r * n;
                    let mut mean_dy = 0.0;
                    let mut mean_dy_xhat = 0.0;
                    for j in 0..n {
                        let dy = g[off + j] * gv[j];
                        mean_dy += dy;
                        mean_dy_xhat += dy * xhat[off + j];
                    }
                    mean_dy /= n as f64;
                    mean_dy_xhat /= n as f64;
                    for j in 0..n {
                        let dy = g[off + j] * gv[j];
                        gx[off + j] += rs * (dy - mean_dy - xhat[off + j] * mean_dy_xhat);
                    }
                }
            });
            accumulate(grads, nodes, *gamma, |gg| {
                for (i, &gi) in g.iter().enumerate() {
                    gg[i % n] += gi * xhat[i];
                }
            });
            accumulate(grads, nodes, *beta, |gb| {
                for chunk in g.chunks_exact(n) {
                    add_into(gb, chunk);
                }
            });
        }
        &Op::Transpose(a) => {
            let (r, c) = val(a).dims2().unwrap();
            let gt = kernels::transpose(g, c, r);
            accumulate(grads, nodes, a, |ga| add_into(ga, &gt));
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = val(p).numel();
                accumulate(grads, nodes, p, |gp| add_into(gp, &g[off..off + len]));
                off += len;
            }
        }
        &Op::NarrowRows { input, start } => {
            let cols = val(input).shape()[1];
            let off = start * cols;
            accumulate(grads, nodes, input, |ga| {
                add_into(&mut ga[off..off + g.len()], g);
            });
        }
        Op::ConcatCols(parts) => {
            let total = out.shape()[1];
            let rows = out.shape()[0];
            let mut col0 = 0;
            for &p in parts {
                let w = val(p).shape()[1];
                accumulate(grads, nodes, p, |gp| {
                    for r in 0..rows {
                        add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + col0..r * total + col0 + w]);
                    }
                });
                col0 += w;
            }
        }
        &Op::NarrowCols { input, start } => {
            let (rows, w) = out.dims2().unwrap();
            let total = val(input).shape()[1];
            accumulate(grads, nodes, input, |ga| {
                for r in 0..rows {
                    add_into(
                        &mut ga[r * total + start..r * total + start + w],
                        &g[r * w..(r + 1) * w],
                    );
                }
            });
        }
        Op::Gather { input, index } => {
            accumulate(grads, nodes, *input, |ga| {
                for (k, &src) in index.iter().enumerate() {
                    if src != GATHER_ZERO {
                        ga[src] += g[k];
                    }
                }
            });
        }
        &Op::Reshape(a) => accumulate(grads, nodes, a, |ga| add_into(ga, g)),
        &Op::Sum(a) => {
            let g0 = g[0];
            accumulate(grads, nodes, a, |ga| {
                for v in ga.iter_mut() {
                    *v += g0;
                }
            });
        }
        &Op::SumLast(a) => {
            let k = *val(a).shape().last().unwrap();
            accumulate(grads, nodes, a, |ga| {
                for (i, v) in ga.iter_mut().enumerate() {
                    *v += g[i / k];
                }
            });
        }
        Op::MaxRows { input, argmax } => {
            let cols = argmax.len();
            accumulate(grads, nodes, *input, |ga| {
                for (c, &r) in argmax.iter().enumerate() {
                    ga[r * cols + c] += g[c];
                }
            });
        }
        Op::Bce {
            logits,
            targets,
            weights,
        } => {
            let xv = val(*logits).data();
            let g0 = g[0];
            accumulate(grads, nodes, *logits, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g0 * weights[i] * (sigmoid(xv[i]) - targets[i]);
                }
            });
        }
        Op::CrossEntropy {
            logits,
            targets,
            weights,
            probs,
        } => {
            let k = val(*logits).shape()[1];
            let g0 = g[0];
            accumulate(grads, nodes, *logits, |ga| {
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    for j in 0..k {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        ga[r * k + j] += g0 * w * (probs[r * k + j] - onehot);
                    }
                }
            });
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.value().shape())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    /// Borrowed view of the value; do not hold across op calls.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        let nodes: Ref<'_, Vec<Node>> = self.tape.nodes.borrow();
        f(&nodes[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|v| v.shape().to_vec())
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        self.with_value(|v| v.dims2())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("operands live on different tapes".into()))
        }
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: &Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn many(tape: &'t Tape, parts: &[Var<'t>], value: Tensor, op: Op) -> Var<'t> {
        let rg = parts.iter().any(|p| p.requires_grad());
        tape.push(value, op, rg)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let out = a.matmul(&b)?;
        Ok(self.binary(other, out, Op::MatMul(self.id, other.id)))
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.dims2()?;
        let (p, k2) = b.dims2()?;
        if k != k2 {
            return Err(dim_err!("matmul_nt inner dims {} vs {}", k, k2));
        }
        let mut c = vec![0.0; m * p];
        kernels::matmul_nt_acc(a.data(), b.data(), &mut c, m, k, p);
        let out = Tensor::new([m, p], c)?;
        Ok(self.binary(other, out, Op::MatMulNt(self.id, other.id)))
    }

    fn zip_with(&self, other: &Var<'t>, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(dim_err!("{name}: shapes {:?} vs {:?}", a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = self.zip_with(other, "add", |x, y| x + y)?;
        Ok(self.binary(other, out, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = self.zip_with(other, "sub", |x, y| x - y)?;
        Ok(self.binary(other, out, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = self.zip_with(other, "mul", |x, y| x * y)?;
        Ok(self.binary(other, out, Op::Mul(self.id, other.id)))
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let out = self.zip_with(other, "div", |x, y| x / y)?;
        Ok(self.binary(other, out, Op::Div(self.id, other.id)))
    }

    fn row_op(&self, row: &Var<'t>, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_tape(row)?;
        let (x, r) = (self.value(), row.value());
        let n = r.numel();
        if x.shape().last() != Some(&n) {
            return Err(dim_err!("{name}: row of {} vs shape {:?}", n, x.shape()));
        }
        let rv = r.data();
        let data = x.data().iter().enumerate().map(|(i, &v)| f(v, rv[i % n])).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    /// Adds a vector to every row (bias broadcast over the last axis).
    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        let out = self.row_op(row, "add_row", |x, r| x + r)?;
        Ok(self.binary(row, out, Op::AddRow(self.id, row.id)))
    }

    /// Multiplies every row elementwise by a vector.
    pub fn mul_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        let out = self.row_op(row, "mul_row", |x, r| x * r)?;
        Ok(self.binary(row, out, Op::MulRow(self.id, row.id)))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let out = self.value().map(|x| x * s);
        self.unary(out, Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        let out = self.value().map(|x| x + s);
        self.unary(out, Op::AddScalar(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        let out = self.value().map(|x| x.max(0.0));
        self.unary(out, Op::Relu(self.id))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'t> {
        let out = self.value().map(gelu);
        self.unary(out, Op::Gelu(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let out = self.value().map(sigmoid);
        self.unary(out, Op::Sigmoid(self.id))
    }

    /// Softmax over the last axis of `self + addmask`. Entries of `addmask`
    /// are 0 (keep) or [`MASK_NEG`] (drop). A row with every slot dropped
    /// falls back to the uniform distribution and is reported in the returned
    /// flag list; no gradient flows through such rows.
    pub fn masked_softmax(&self, addmask: Option<&Tensor>) -> Result<(Var<'t>, Vec<bool>)> {
        let x = self.value();
        let k = *x.shape().last().ok_or_else(|| dim_err!("softmax of a scalar"))?;
        if let Some(m) = addmask {
            if m.shape() != x.shape() {
                return Err(dim_err!("softmax mask {:?} vs logits {:?}", m.shape(), x.shape()));
            }
        }
        let rows = if k == 0 { 0 } else { x.numel() / k };
        let mut out = vec![0.0; x.numel()];
        let mut fallback = vec![false; rows];
        for r in 0..rows {
            let xs = &x.data()[r * k..(r + 1) * k];
            let ms = addmask.map(|m| &m.data()[r * k..(r + 1) * k]);
            let keep = |j: usize| ms.map_or(true, |m| m[j] > MASK_NEG * 0.5);
            if !(0..k).any(keep) {
                fallback[r] = true;
                out[r * k..(r + 1) * k].fill(1.0 / k as f64);
                continue;
            }
            let shifted: Vec<f64> = (0..k)
                .map(|j| xs[j] + ms.map_or(0.0, |m| m[j]))
                .collect();
            let max = shifted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..k {
                let e = (shifted[j] - max).exp();
                out[r * k + j] = e;
                sum += e;
            }
            for v in &mut out[r * k..(r + 1) * k] {
                *v /= sum;
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let var = self.unary(
            value,
            Op::Softmax {
                input: self.id,
                fallback: fallback.clone(),
            },
        );
        Ok((var, fallback))
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&self, gamma: &Var<'t>, beta: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.same_tape(gamma)?;
        self.same_tape(beta)?;
        let x = self.value();
        let (g, b) = (gamma.value(), beta.value());
        let n = g.numel();
        if x.shape().last() != Some(&n) || b.numel() != n {
            return Err(dim_err!("layer_norm over {} features, input {:?}", n, x.shape()));
        }
        let rows = x.numel() / n.max(1);
        let mut xhat = vec![0.0; x.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.numel()];
        for r in 0..rows {
            let xs = &x.data()[r * n..(r + 1) * n];
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (xs[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let out = self.value().transpose()?;
        Ok(self.unary(out, Op::Transpose(self.id)))
    }

    /// Stacks 2-D tensors with equal column counts on top of each other.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| dim_err!("concat of nothing"))?;
        let cols = first.dims2()?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            first.same_tape(p)?;
            let v = p.value();
            let (r, c) = v.dims2()?;
            if c != cols {
                return Err(dim_err!("concat_rows: {} vs {} columns", c, cols));
            }
            rows += r;
            data.extend_from_slice(v.data());
        }
        let value = Tensor::new([rows, cols], data)?;
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(Self::many(first.tape, parts, value, Op::ConcatRows(ids)))
    }

    pub fn narrow_rows(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        let (r, c) = v.dims2()?;
        if start + len > r {
            return Err(dim_err!("rows {}..{} out of {}", start, start + len, r));
        }
        let value = Tensor::new([len, c], v.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.unary(value, Op::NarrowRows { input: self.id, start }))
    }

    /// Places 2-D tensors with equal row counts side by side.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| dim_err!("concat of nothing"))?;
        let rows = first.dims2()?.0;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let mut total = 0;
        for (p, v) in parts.iter().zip(&values) {
            first.same_tape(p)?;
            let (r, c) = v.dims2()?;
            if r != rows {
                return Err(dim_err!("concat_cols: {} vs {} rows", r, rows));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        let value = Tensor::new([rows, total], data)?;
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(Self::many(first.tape, parts, value, Op::ConcatCols(ids)))
    }

    pub fn narrow_cols(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        let (r, c) = v.dims2()?;
        if start + len > c {
            return Err(dim_err!("cols {}..{} out of {}", start, start + len, c));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&v.data()[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new([r, len], data)?;
        Ok(self.unary(value, Op::NarrowCols { input: self.id, start }))
    }

    /// `out.flat[k] = self.flat[index[k]]`, or 0 where `index[k] == GATHER_ZERO`.
    /// Covers row selection, im2col and other pure data movement.
    pub fn gather(&self, index: Arc<[usize]>, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != index.len() {
            return Err(dim_err!("gather: {} indices for shape {:?}", index.len(), shape));
        }
        let v = self.value();
        let n = v.numel();
        let mut data = Vec::with_capacity(index.len());
        for &i in index.iter() {
            if i == GATHER_ZERO {
                data.push(0.0);
            } else if i < n {
                data.push(v.data()[i]);
            } else {
                return Err(dim_err!("gather index {} out of {}", i, n));
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.unary(value, Op::Gather { input: self.id, index }))
    }

    /// Selects whole rows of a 2-D tensor.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Var<'t>> {
        let (r, c) = self.dims2()?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(dim_err!("row {} out of {}", bad, r));
        }
        let index: Arc<[usize]> = rows
            .iter()
            .flat_map(|&i| (i * c)..(i * c + c))
            .collect();
        self.gather(index, [rows.len(), c])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let out = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(out, Op::Reshape(self.id)))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&self) -> Result<Var<'t>> {
        let v = self.value();
        let shape = v.shape();
        let k = *shape.last().ok_or_else(|| dim_err!("sum_last of a scalar"))?;
        let data = if k == 0 {
            vec![0.0; v.numel()]
        } else {
            v.data().chunks_exact(k).map(|c| c.iter().sum()).collect()
        };
        let out = Tensor::new(shape[..shape.len() - 1].to_vec(), data)?;
        Ok(self.unary(out, Op::SumLast(self.id)))
    }

    /// Column-wise maximum over the rows of a 2-D tensor, giving `[1×cols]`.
    pub fn max_rows(&self) -> Result<Var<'t>> {
        let v = self.value();
        let (r, c) = v.dims2()?;
        if r == 0 {
            return Err(dim_err!("max over zero rows"));
        }
        let mut best = v.row(0).to_vec();
        let mut argmax = vec![0; c];
        for i in 1..r {
            for (j, &x) in v.row(i).iter().enumerate() {
                if x > best[j] {
                    best[j] = x;
                    argmax[j] = i;
                }
            }
        }
        let out = Tensor::new([1, c], best)?;
        Ok(self.unary(out, Op::MaxRows { input: self.id, argmax }))
    }

    /// Weighted sum of binary cross-entropy terms computed from logits.
    pub fn bce_with_logits(&self, targets: &[f64], weights: &[f64]) -> Result<Var<'t>> {
        let x = self.value();
        if targets.len() != x.numel() || weights.len() != x.numel() {
            return Err(dim_err!(
                "bce: {} logits, {} targets, {} weights",
                x.numel(),
                targets.len(),
                weights.len()
            ));
        }
        let loss = x
            .data()
            .iter()
            .zip(targets)
            .zip(weights)
            .map(|((&l, &t), &w)| w * (l.max(0.0) - l * t + (-l.abs()).exp().ln_1p()))
            .sum();
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::Bce {
                logits: self.id,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// Weighted sum of per-row softmax cross-entropy terms; `self` is
    /// `[rows×classes]`.
    pub fn cross_entropy(&self, targets: &[usize], weights: &[f64]) -> Result<Var<'t>> {
        let x = self.value();
        let (r, k) = x.dims2()?;
        if targets.len() != r || weights.len() != r {
            return Err(dim_err!("cross_entropy: {} rows, {} targets", r, targets.len()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(dim_err!("class {} out of {}", bad, k));
        }
        let mut probs = vec![0.0; r * k];
        let mut loss = 0.0;
        for i in 0..r {
            let row = x.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            loss += weights[i] * (lse - row[targets[i]]);
        }
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::new();
        let one = tape.constant(t2(&[&[1.0]]));
        assert_eq!(one.matmul(&one).unwrap().value().data(), &[1.0]);

        let a = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.constant(t2(&[&[5.0, 6.0], &[7.0, 8.0]]));
        assert_eq!(a.matmul(&b).unwrap().value().data(), &[19.0, 22.0, 43.0, 50.0]);

        let i = tape.constant(Tensor::eye(2));
        assert_eq!(a.matmul(&i).unwrap().value().data(), a.value().data());

        let bad = tape.constant(Tensor::zeros([3, 1]));
        assert!(matches!(a.matmul(&bad), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let x = tape.constant(t2(&[&[0.0, 0.0]]));
        let m = t2(&[&[0.0, MASK_NEG]]);
        let (y, fb) = x.masked_softmax(Some(&m)).unwrap();
        assert_eq!(y.value().data(), &[1.0, 0.0]);
        assert_eq!(fb, vec![false]);

        let x = tape.constant(t2(&[&[0.0, 2f64.ln()]]));
        let (y, _) = x.masked_softmax(None).unwrap();
        assert!((y.value().data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((y.value().data()[1] - 2.0 / 3.0).abs() < 1e-15);

        let x = tape.constant(Tensor::full([1, 4], 3.7));
        let (y, _) = x.masked_softmax(None).unwrap();
        assert!(y.value().data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn fully_masked_row_falls_back_to_uniform() {
        let tape = Tape::new();
        let x = tape.leaf(t2(&[&[1.0, 2.0, 3.0], &[1.0, 0.0, 0.0]]), true);
        let m = t2(&[&[MASK_NEG; 3], &[0.0, MASK_NEG, 0.0]]);
        let (y, fb) = x.masked_softmax(Some(&m)).unwrap();
        assert_eq!(fb, vec![true, false]);
        let v = y.value();
        assert!(v.row(0).iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(v.at(1, 1), 0.0);
        let loss = y.narrow_rows(0, 1).unwrap().sum();
        tape.backward(loss).unwrap();
        assert!(x.grad().unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.5), true);
        tape.backward(x).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0]);

        let tape = Tape::new();
        let a = tape.leaf(t2(&[&[1.0, 2.0], &[3.0, 4.0]]), true);
        let b = tape.leaf(t2(&[&[5.0, 6.0], &[7.0, 8.0]]), true);
        let loss = a.matmul(&b).unwrap().sum();
        tape.backward(loss).unwrap();
        // d/dA sum(AB) = 1·Bᵀ: each row of the gradient holds the row sums of B.
        assert_eq!(a.grad().unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        // d/dB sum(AB) = Aᵀ·1: column sums of A in every column.
        assert_eq!(b.grad().unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn backward_contract_errors() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full([2], 1.0), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let s = x.sum();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
    }

    #[test]
    fn inference_tape_tracks_no_gradients() {
        let tape = Tape::inference();
        let x = tape.leaf(Tensor::scalar(1.0), true);
        assert!(!x.requires_grad());
        assert!(tape.backward(x.scale(2.0)).is_err());
        assert!(tape.live_bytes() >= 16);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln3() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros([4, 3]));
        let l = x.cross_entropy(&[0, 1, 2, 1], &[0.25; 4]).unwrap();
        assert!((l.value().item() - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn max_rows_picks_the_maximum() {
        let tape = Tape::new();
        let x = tape.constant(t2(&[&[1.0, -1.0], &[3.0, -5.0], &[-2.0, 0.5]]));
        assert_eq!(x.max_rows().unwrap().value().data(), &[3.0, 0.5]);
    }
}
