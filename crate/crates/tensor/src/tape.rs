//! Reverse-mode autodiff over [`Tensor`] values.
//!
//! Every op on a [`Var`] appends a node to its [`Tape`]. Values are immutable
//! once recorded. [`Tape::backward`] walks the nodes in reverse and
//! accumulates vector-Jacobian products into a [`Gradients`] table.

use std::cell::{Ref, RefCell};

use crate::element::Element;
use crate::error::{dim_err, Result, TensorError};
use crate::shape::{numel, split_axis};
use crate::tensor::{binary, matmul_impl, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Exp,
    Log,
    Sqrt,
    Square,
    Gelu,
    Silu,
    Sigmoid,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Unary(Unary, usize),
    Binary(Binary, usize, usize),
    Scale(usize, T),
    Matmul(usize, usize),
    Softmax(usize, usize),
    LayerNorm {
        x: usize,
        gain: Option<usize>,
        bias: Option<usize>,
        axis: usize,
        xhat: Tensor<T>,
        rstd: Vec<T>,
    },
    Sum(usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Concat(Vec<usize>, usize),
    Gather(usize, Vec<usize>),
    BroadcastTo(usize),
    Rotary {
        x: usize,
        cos: Tensor<T>,
        sin: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a computation. Confined to one thread.
pub struct Tape<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Element> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Element> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, or zeros of its shape when it was unreachable.
    pub fn get_or_zero(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable leaf; backward reports a gradient for it.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
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

    fn record(&self, op_name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Result<Var<'_, T>> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        Ok(self.push(value, op, requires_grad))
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let shape = nodes[loss.id].value.shape().to_vec();
        grads[loss.id] = Some(Tensor::ones(shape));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        // only leaves keep meaningful accumulated gradients for callers, but
        // intermediate gradients are retained for inspection in tests
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Tensor<T>>], nodes: &[Node<T>], id: usize, g: Tensor<T>) -> Result<()> {
    if !nodes[id].requires_grad {
        return Ok(());
    }
    debug_assert_eq!(g.shape(), nodes[id].value.shape());
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

fn backprop<T: Element>(nodes: &[Node<T>], id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
    let node = &nodes[id];
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Unary(kind, x) => {
            let xv = &nodes[*x].value;
            let gx = match kind {
                Unary::Neg => g.map(|v| -v),
                Unary::Exp => binary(g, out, "exp'", |g, y| g * y)?,
                Unary::Log => binary(g, xv, "log'", |g, x| g / x)?,
                Unary::Sqrt => binary(g, out, "sqrt'", |g, y| g / (y + y))?,
                Unary::Square => binary(g, xv, "square'", |g, x| g * (x + x))?,
                Unary::Gelu => binary(g, xv, "gelu'", |g, x| g * gelu_grad(x))?,
                Unary::Silu => binary(g, xv, "silu'", |g, x| {
                    let s = sigmoid(x);
                    g * (s + x * s * (T::one() - s))
                })?,
                Unary::Sigmoid => binary(g, out, "sigmoid'", |g, y| g * y * (T::one() - y))?,
                Unary::Tanh => binary(g, out, "tanh'", |g, y| g * (T::one() - y * y))?,
            };
            accumulate(grads, nodes, *x, gx)?;
        }
        Op::Binary(kind, a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (ga, gb) = match kind {
                Binary::Add => (g.clone(), g.clone()),
                Binary::Sub => (g.clone(), g.map(|v| -v)),
                Binary::Mul => (binary(g, bv, "mul'", |g, b| g * b)?, binary(g, av, "mul'", |g, a| g * a)?),
                Binary::Div => {
                    let ga = binary(g, bv, "div'", |g, b| g / b)?;
                    let gb = binary(&binary(g, av, "div'", |g, a| g * a)?, bv, "div'", |ga, b| -ga / (b * b))?;
                    (ga, gb)
                }
            };
            if nodes[*a].requires_grad {
                accumulate(grads, nodes, *a, ga.reduce_to(av.shape())?)?;
            }
            if nodes[*b].requires_grad {
                accumulate(grads, nodes, *b, gb.reduce_to(bv.shape())?)?;
            }
        }
        Op::Scale(x, c) => {
            let c = *c;
            accumulate(grads, nodes, *x, g.map(|v| v * c))?;
        }
        Op::Matmul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            if nodes[*a].requires_grad {
                // dA = G B^T, summed over broadcast batch axes
                let ga = matmul_impl(g, false, bv, true)?;
                accumulate(grads, nodes, *a, reduce_batch(ga, av.shape())?)?;
            }
            if nodes[*b].requires_grad {
                let gb = matmul_impl(av, true, g, false)?;
                accumulate(grads, nodes, *b, reduce_batch(gb, bv.shape())?)?;
            }
        }
        Op::Softmax(x, axis) => {
            let (outer, n, inner) = split_axis("softmax'", out.shape(), *axis)?;
            let y = out.data();
            let gd = g.data();
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * n * inner + j * inner + i;
                    let mut dot = T::zero();
                    for j in 0..n {
                        dot += gd[at(j)] * y[at(j)];
                    }
                    for j in 0..n {
                        gx[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                    }
                }
            }
            accumulate(grads, nodes, *x, Tensor::new(out.shape(), gx)?)?;
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            axis,
            xhat,
            rstd,
        } => {
            let (outer, n, inner) = split_axis("layer_norm'", out.shape(), *axis)?;
            let gd = g.data();
            let xh = xhat.data();
            let gain_v = gain.map(|p| nodes[p].value.data().to_vec());
            let mut gx = vec![T::zero(); gd.len()];
            let mut ggain = vec![T::zero(); n];
            let mut gbias = vec![T::zero(); n];
            let nf = T::from_usize(n).unwrap();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * n * inner + j * inner + i;
                    let r = rstd[o * inner + i];
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..n {
                        let k = at(j);
                        let d = match &gain_v {
                            Some(gv) => gd[k] * gv[j],
                            None => gd[k],
                        };
                        mean_d += d;
                        mean_dx += d * xh[k];
                        ggain[j] += gd[k] * xh[k];
                        gbias[j] += gd[k];
                    }
                    mean_d = mean_d / nf;
                    mean_dx = mean_dx / nf;
                    for j in 0..n {
                        let k = at(j);
                        let d = match &gain_v {
                            Some(gv) => gd[k] * gv[j],
                            None => gd[k],
                        };
                        gx[k] = r * (d - mean_d - xh[k] * mean_dx);
                    }
                }
            }
            accumulate(grads, nodes, *x, Tensor::new(out.shape(), gx)?)?;
            if let Some(p) = gain {
                accumulate(grads, nodes, *p, Tensor::new([n], ggain)?)?;
            }
            if let Some(p) = bias {
                accumulate(grads, nodes, *p, Tensor::new([n], gbias)?)?;
            }
        }
        Op::Sum(x) => {
            // Sum nodes always hold the keepdim shape
            let gx = g.broadcast_to(nodes[*x].value.shape())?;
            accumulate(grads, nodes, *x, gx)?;
        }
        Op::BroadcastTo(x) => {
            accumulate(grads, nodes, *x, g.reduce_to(nodes[*x].value.shape())?)?;
        }
        Op::Reshape(x) => {
            accumulate(grads, nodes, *x, g.reshape(nodes[*x].value.shape())?)?;
        }
        Op::Permute(x, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            accumulate(grads, nodes, *x, g.permute(&inv)?)?;
        }
        Op::Slice { x, axis, start } => {
            let xs = nodes[*x].value.shape();
            let (outer, extent, inner) = split_axis("slice'", xs, *axis)?;
            let len = g.shape()[*axis];
            let mut gx = vec![T::zero(); numel(xs)];
            for o in 0..outer {
                let dst = o * extent * inner + start * inner;
                let src = o * len * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
            }
            accumulate(grads, nodes, *x, Tensor::new(xs, gx)?)?;
        }
        Op::Concat(parts, axis) => {
            let mut start = 0;
            for &p in parts {
                let len = nodes[p].value.shape()[*axis];
                if nodes[p].requires_grad {
                    accumulate(grads, nodes, p, g.slice(*axis, start, len)?)?;
                }
                start += len;
            }
        }
        Op::Gather(table, indices) => {
            let ts = nodes[*table].value.shape();
            let width = numel(&ts[1..]);
            let mut gt = vec![T::zero(); numel(ts)];
            for (row, &i) in indices.iter().enumerate() {
                for (d, s) in gt[i * width..(i + 1) * width]
                    .iter_mut()
                    .zip(&g.data()[row * width..(row + 1) * width])
                {
                    *d += *s;
                }
            }
            accumulate(grads, nodes, *table, Tensor::new(ts, gt)?)?;
        }
        Op::Rotary { x, cos, sin } => {
            let gx = rotate(g, cos, sin, true)?;
            accumulate(grads, nodes, *x, gx)?;
        }
    }
    Ok(())
}

fn reduce_batch<T: Element>(g: Tensor<T>, target: &[usize]) -> Result<Tensor<T>> {
    if g.shape() == target {
        return Ok(g);
    }
    // pad target with leading ones so reduce_to sees equal ranks
    let mut padded = vec![1; g.rank().saturating_sub(target.len())];
    padded.extend_from_slice(target);
    g.reduce_to(&padded)?.reshape(target)
}

fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn gelu_consts<T: Element>() -> (T, T) {
    (
        T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt()),
        T::from_f64_lossy(0.044715),
    )
}

fn gelu<T: Element>(x: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Element>(x: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * a * x * x)
}

/// Rotates adjacent pairs of the last axis. `x` is `[.., L, d]`, tables are `[L, d/2]`.
fn rotate<T: Element>(x: &Tensor<T>, cos: &Tensor<T>, sin: &Tensor<T>, inverse: bool) -> Result<Tensor<T>> {
    let r = x.rank();
    if r < 2 {
        return Err(dim_err("rotary", "input needs rank >= 2"));
    }
    let (l, d) = (x.shape()[r - 2], x.shape()[r - 1]);
    if d % 2 != 0 || cos.shape() != [l, d / 2] || sin.shape() != [l, d / 2] {
        return Err(TensorError::Shape {
            op: "rotary",
            lhs: x.shape().to_vec(),
            rhs: cos.shape().to_vec(),
        });
    }
    let half = d / 2;
    let mut out = x.data().to_vec();
    for (row, chunk) in out.chunks_exact_mut(d).enumerate() {
        let pos = row % l;
        for i in 0..half {
            let c = cos.data()[pos * half + i];
            let s = if inverse {
                -sin.data()[pos * half + i]
            } else {
                sin.data()[pos * half + i]
            };
            let (a, b) = (chunk[2 * i], chunk[2 * i + 1]);
            chunk[2 * i] = a * c - b * s;
            chunk[2 * i + 1] = a * s + b * c;
        }
    }
    Tensor::new(x.shape(), out)
}

impl<'t, T: Element> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        self.tape.value(self.id)
    }

    /// Owned copy of the value.
    pub fn to_tensor(&self) -> Tensor<T> {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Copies the current value into a constant leaf (stop-gradient).
    pub fn detach(&self) -> Var<'t, T> {
        let v = self.value().clone();
        self.tape.constant(v)
    }

    fn same_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::Contract("operands live on different tapes".into()))
        }
    }

    pub fn unary(&self, kind: Unary) -> Result<Var<'t, T>> {
        let x = self.value();
        let (name, out) = match kind {
            Unary::Neg => ("neg", x.map(|v| -v)),
            Unary::Exp => ("exp", x.map(|v| v.exp())),
            Unary::Log => {
                if x.data().iter().any(|&v| v <= T::zero()) {
                    return Err(TensorError::Domain {
                        op: "log",
                        detail: "argument must be positive".into(),
                    });
                }
                ("log", x.map(|v| v.ln()))
            }
            Unary::Sqrt => {
                if x.data().iter().any(|&v| v < T::zero()) {
                    return Err(TensorError::Domain {
                        op: "sqrt",
                        detail: "argument must be nonnegative".into(),
                    });
                }
                ("sqrt", x.map(|v| v.sqrt()))
            }
            Unary::Square => ("square", x.map(|v| v * v)),
            Unary::Gelu => ("gelu", x.map(gelu)),
            Unary::Silu => ("silu", x.map(|v| v * sigmoid(v))),
            Unary::Sigmoid => ("sigmoid", x.map(sigmoid)),
            Unary::Tanh => ("tanh", x.map(|v| v.tanh())),
        };
        drop(x);
        self.tape.record(name, out, Op::Unary(kind, self.id), &[self.id])
    }

    pub fn binary(&self, kind: Binary, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let (name, out) = match kind {
            Binary::Add => ("add", binary(&a, &b, "add", |x, y| x + y)?),
            Binary::Sub => ("sub", binary(&a, &b, "sub", |x, y| x - y)?),
            Binary::Mul => ("mul", binary(&a, &b, "mul", |x, y| x * y)?),
            Binary::Div => {
                if b.data().iter().any(|v| v.is_zero()) {
                    return Err(TensorError::Domain {
                        op: "div",
                        detail: "division by zero".into(),
                    });
                }
                ("div", binary(&a, &b, "div", |x, y| x / y)?)
            }
        };
        drop((a, b));
        self.tape
            .record(name, out, Op::Binary(kind, self.id, other.id), &[self.id, other.id])
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(Binary::Add, other)
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(Binary::Sub, other)
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(Binary::Mul, other)
    }

    pub fn div(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(Binary::Div, other)
    }

    pub fn neg(&self) -> Result<Var<'t, T>> {
        self.unary(Unary::Neg)
    }

    pub fn exp(&self) -> Result<Var<'t, T>> {
        self.unary(Unary::Exp)
    }

    pub fn log(&self) -> Result<Var<'t, T>> {
        self.unary(Unary::Log)
    }

    pub fn sqrt(&self) -> Result<Var<'t, T>> {
        self.unary(Unary::Sqrt)
    }

    pub fn square(&self) -> Result<Var<'t, T>> {
        self.unary(Unary::Square)
    }

    pub fn gelu(&self) -> Result<Var<'t, T>> {
        self.unary(Unary::Gelu)
    }

    pub fn silu(&self) -> Result<Var<'t, T>> {
        self.unary(Unary::Silu)
    }

    pub fn sigmoid(&self) -> Result<Var<'t, T>> {
        self.unary(Unary::Sigmoid)
    }

    pub fn tanh(&self) -> Result<Var<'t, T>> {
        self.unary(Unary::Tanh)
    }

    /// Multiplies by a constant scalar.
    pub fn scale(&self, c: f64) -> Result<Var<'t, T>> {
        let c = T::from_f64_lossy(c);
        let out = self.value().map(|v| v * c);
        self.tape.record("scale", out, Op::Scale(self.id, c), &[self.id])
    }

    /// Adds a constant scalar.
    pub fn add_scalar(&self, c: f64) -> Result<Var<'t, T>> {
        let k = self.tape.constant(Tensor::scalar(T::from_f64_lossy(c)));
        self.add(&k)
    }

    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let out = matmul_impl(&self.value(), false, &other.value(), false)?;
        self.tape
            .record("matmul", out, Op::Matmul(self.id, other.id), &[self.id, other.id])
    }

    /// `x W + b` over the last axis.
    pub fn linear(&self, weight: &Var<'t, T>, bias: Option<&Var<'t, T>>) -> Result<Var<'t, T>> {
        let y = self.matmul(weight)?;
        match bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let out = self.value().softmax(axis)?;
        self.tape.record("softmax", out, Op::Softmax(self.id, axis), &[self.id])
    }

    /// Normalizes along `axis`; optional `gain`/`bias` have the axis extent.
    pub fn layer_norm(
        &self,
        gain: Option<&Var<'t, T>>,
        bias: Option<&Var<'t, T>>,
        axis: usize,
        eps: f64,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let (outer, n, inner) = split_axis("layer_norm", x.shape(), axis)?;
        if n == 0 {
            return Err(dim_err("layer_norm", "normalized axis has zero length"));
        }
        for p in [gain, bias].into_iter().flatten() {
            if p.shape() != [n] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: x.shape().to_vec(),
                    rhs: p.shape(),
                });
            }
        }
        let gv = gain.map(|g| g.value().data().to_vec());
        let bv = bias.map(|b| b.value().data().to_vec());
        let eps = T::from_f64_lossy(eps);
        let nf = T::from_usize(n).unwrap();
        let xd = x.data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let mean = (0..n).map(|j| xd[at(j)]).sum::<T>() / nf;
                let var = (0..n).map(|j| (xd[at(j)] - mean) * (xd[at(j)] - mean)).sum::<T>() / nf;
                let r = T::one() / (var + eps).sqrt();
                rstd[o * inner + i] = r;
                for j in 0..n {
                    let k = at(j);
                    let h = (xd[k] - mean) * r;
                    xhat[k] = h;
                    let mut y = h;
                    if let Some(g) = &gv {
                        y *= g[j];
                    }
                    if let Some(b) = &bv {
                        y += b[j];
                    }
                    out[k] = y;
                }
            }
        }
        let shape = x.shape().to_vec();
        drop(x);
        let mut parents = vec![self.id];
        parents.extend(gain.map(|g| g.id));
        parents.extend(bias.map(|b| b.id));
        self.tape.record(
            "layer_norm",
            Tensor::new(shape.clone(), out)?,
            Op::LayerNorm {
                x: self.id,
                gain: gain.map(|g| g.id),
                bias: bias.map(|b| b.id),
                axis,
                xhat: Tensor::new(shape, xhat)?,
                rstd,
            },
            &parents,
        )
    }

    pub fn sum(&self, axes: &[usize], keepdim: bool) -> Result<Var<'t, T>> {
        let kept = self.value().sum_axes(axes, true)?;
        let summed = self.tape.record("sum", kept, Op::Sum(self.id), &[self.id])?;
        if keepdim {
            return Ok(summed);
        }
        let shape: Vec<usize> = self
            .shape()
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        summed.reshape(shape)
    }

    pub fn sum_all(&self) -> Result<Var<'t, T>> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.sum(&axes, false)
    }

    pub fn mean(&self, axes: &[usize], keepdim: bool) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let count: usize = axes.iter().map(|&a| shape.get(a).copied().unwrap_or(1)).product();
        if count == 0 {
            return Err(dim_err("mean", "cannot average over an empty axis"));
        }
        self.sum(axes, keepdim)?.scale(1.0 / count as f64)
    }

    pub fn mean_all(&self) -> Result<Var<'t, T>> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.mean(&axes, false)
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let out = self.value().reshape(shape)?;
        self.tape.record("reshape", out, Op::Reshape(self.id), &[self.id])
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value().permute(perm)?;
        self.tape
            .record("permute", out, Op::Permute(self.id, perm.to_vec()), &[self.id])
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Var<'t, T>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(dim_err("transpose", "rank must be >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(&perm)
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let out = self.value().slice(axis, start, len)?;
        self.tape
            .record("slice", out, Op::Slice { x: self.id, axis, start }, &[self.id])
    }

    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| dim_err("concat", "no tensors to concatenate"))?;
        for p in parts {
            first.same_tape(p)?;
        }
        let out = {
            let values: Vec<Ref<'_, Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
            let refs: Vec<&Tensor<T>> = values.iter().map(|r| &**r).collect();
            Tensor::concat(&refs, axis)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        first.tape.record("concat", out, Op::Concat(ids.clone(), axis), &ids)
    }

    /// Row lookup into `self` (the table); gradients scatter back into it.
    pub fn gather(&self, indices: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value().gather_rows(indices)?;
        self.tape
            .record("gather", out, Op::Gather(self.id, indices.to_vec()), &[self.id])
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = self.value().broadcast_to(shape)?;
        self.tape.record("broadcast_to", out, Op::BroadcastTo(self.id), &[self.id])
    }

    /// Rotary position encoding of adjacent pairs on the last axis.
    /// `self` is `[.., L, d]`; `cos`/`sin` are constant `[L, d/2]` tables.
    pub fn rotary(&self, cos: &Tensor<T>, sin: &Tensor<T>) -> Result<Var<'t, T>> {
        let out = rotate(&self.value(), cos, sin, false)?;
        self.tape.record(
            "rotary",
            out,
            Op::Rotary {
                x: self.id,
                cos: cos.clone(),
                sin: sin.clone(),
            },
            &[self.id],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let tape = Tape::new();
        let p = tape.param(t(&[3], &[0.3, -1.0, 2.0]));
        let loss = p.sum_all().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_square_gives_identity() {
        let tape = Tape::new();
        let p = tape.param(t(&[2], &[1.0, 2.0]));
        let loss = p.square().unwrap().sum_all().unwrap().scale(0.5).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let tape = Tape::new();
        let p = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(p), Err(TensorError::Contract(_))));
    }

    #[test]
    fn domain_errors() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[-1.0, 2.0]));
        assert!(matches!(x.log(), Err(TensorError::Domain { .. })));
        assert!(matches!(x.sqrt(), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::<f32>::new();
        let z = tape.constant(Tensor::zeros([4]));
        assert_eq!(z.gelu().unwrap().value().data(), &[0.0; 4]);
        assert_eq!(z.exp().unwrap().value().data(), &[1.0; 4]);
        let v = tape.constant(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
        let two = tape.constant(Tensor::scalar(2.0));
        assert_eq!(v.add(&two).unwrap().value().data(), &[3.0, 4.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let tape = Tape::new();
        let c = tape.constant(t(&[1, 3], &[5.0, 5.0, 5.0]));
        let gain = tape.constant(t(&[3], &[2.0, 2.0, 2.0]));
        let bias = tape.constant(t(&[3], &[0.5, -0.5, 1.0]));
        let y = c.layer_norm(Some(&gain), Some(&bias), 1, 1e-5).unwrap();
        assert_eq!(y.value().data(), &[0.5, -0.5, 1.0]);

        let x = tape.constant(t(&[2], &[1.0, -1.0]));
        let y = x.layer_norm(None, None, 0, 1e-12).unwrap().to_tensor();
        assert!((y.data()[0] - 1.0).abs() < 1e-9 && (y.data()[1] + 1.0).abs() < 1e-9);

        let x = tape.constant(t(&[2, 2], &[3.0, -7.0, 0.1, 4.0]));
        let zero = tape.constant(t(&[2], &[0.0, 0.0]));
        let b = tape.constant(t(&[2], &[0.25, 0.75]));
        let y = x.layer_norm(Some(&zero), Some(&b), 1, 1e-5).unwrap();
        assert_eq!(y.value().data(), &[0.25, 0.75, 0.25, 0.75]);

        let empty = tape.constant(Tensor::zeros([2, 0]));
        assert!(matches!(empty.layer_norm(None, None, 1, 1e-5), Err(TensorError::Dimension { .. })));
    }

    #[test]
    fn gather_scatters_gradient() {
        let tape = Tape::new();
        let table = tape.param(t(&[2, 2], &[1., 2., 3., 4.]));
        let rows = table.gather(&[1, 1, 0]).unwrap();
        assert_eq!(rows.value().data(), &[3., 4., 3., 4., 1., 2.]);
        let g = tape.backward(rows.sum_all().unwrap()).unwrap();
        assert_eq!(g.get(table).unwrap().data(), &[1., 1., 2., 2.]);
    }

    #[test]
    fn reaches_each_param_once() {
        let tape = Tape::new();
        let p = tape.param(t(&[2], &[1.0, 3.0]));
        // p used twice: d/dp (p*p + p) = 2p + 1
        let y = p.mul(&p).unwrap().add(&p).unwrap().sum_all().unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[3.0, 7.0]);
        // a second backward call yields the same gradients, not doubled ones
        let g2 = tape.backward(y).unwrap();
        assert_eq!(g2.get(p).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let p = tape.param(t(&[1], &[2.0]));
        let y = p.detach().mul(&p).unwrap().sum_all().unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[2.0]);
    }
}
