//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive as it executes; [`Var`] is an index
//! into the recording. Nodes only ever reference earlier nodes, so the
//! record is topologically ordered by construction and the backward sweep
//! is a single reverse pass that visits each node once.
//!
//! Gradient bookkeeping is skipped for subgraphs that cannot reach a
//! `requires_grad` leaf, so an attack that differentiates w.r.t. the input
//! never pays for parameter gradients and vice versa.

use std::cell::RefCell;

use crate::conv::{conv2d_backward, conv2d_forward, Conv2dGeometry};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::{axis_split, Tensor, TensorError, TensorResult};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<E: Scalar> {
    Leaf,
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Min(Var, Var),
    Scale(Var, E),
    Clamp(Var, E, E),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geo: Conv2dGeometry,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    GlobalAvgPool(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    GatherRows {
        x: Var,
        indices: Vec<usize>,
    },
    Reshape(Var),
}

struct Node<E: Scalar> {
    value: Tensor<E>,
    needs_grad: bool,
    op: Op<E>,
}

pub struct Tape<E: Scalar = f32> {
    nodes: RefCell<Vec<Node<E>>>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor<E>, needs_grad: bool, op: Op<E>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Var(nodes.len() - 1)
    }

    /// Record an input node. Gradients are tracked only for leaves created
    /// with `requires_grad`.
    pub fn leaf(&self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor<E>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> Tensor<E> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn unary(&self, x: Var, value: Tensor<E>, op: Op<E>) -> Var {
        let needs = self.needs_grad(x);
        self.push(value, needs, op)
    }

    pub fn relu(&self, x: Var) -> Var {
        let v = ops::relu(&self.value(x));
        self.unary(x, v, Op::Relu(x))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let v = ops::sigmoid(&self.value(x));
        self.unary(x, v, Op::Sigmoid(x))
    }

    pub fn exp(&self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.exp());
        self.unary(x, v, Op::Exp(x))
    }

    pub fn scale(&self, x: Var, c: E) -> Var {
        let v = self.value(x).map(|a| a * c);
        self.unary(x, v, Op::Scale(x, c))
    }

    pub fn clamp(&self, x: Var, lo: E, hi: E) -> TensorResult<Var> {
        if lo > hi {
            return Err(TensorError::InvalidArgument {
                context: "clamp",
                message: format!("lower bound {lo} above upper bound {hi}"),
            });
        }
        let v = self.value(x).map(|a| a.max(lo).min(hi));
        Ok(self.unary(x, v, Op::Clamp(x, lo, hi)))
    }

    pub fn add(&self, a: Var, b: Var) -> TensorResult<Var> {
        let v = self
            .value(a)
            .broadcast_with(&self.value(b), "add", |x, y| x + y)?;
        let needs = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(v, needs, Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> TensorResult<Var> {
        let v = self
            .value(a)
            .broadcast_with(&self.value(b), "sub", |x, y| x - y)?;
        let needs = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(v, needs, Op::Sub(a, b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> TensorResult<Var> {
        let v = self
            .value(a)
            .broadcast_with(&self.value(b), "mul", |x, y| x * y)?;
        let needs = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(v, needs, Op::Mul(a, b)))
    }

    /// Elementwise minimum; requires equal shapes. Gradient follows the
    /// smaller operand (ties favor the first).
    pub fn min(&self, a: Var, b: Var) -> TensorResult<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::NotBroadcastable {
                context: "min",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let v = va.broadcast_with(&vb, "min", |x, y| x.min(y))?;
        let needs = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(v, needs, Op::Min(a, b)))
    }

    pub fn conv2d(&self, x: Var, w: Var, b: Var, geo: Conv2dGeometry) -> TensorResult<Var> {
        let v = conv2d_forward(&self.value(x), &self.value(w), &self.value(b), geo)?;
        let needs = self.needs_grad(x) || self.needs_grad(w) || self.needs_grad(b);
        Ok(self.push(v, needs, Op::Conv2d { x, w, b, geo }))
    }

    pub fn dense(&self, x: Var, w: Var, b: Var) -> TensorResult<Var> {
        let v = ops::dense_forward(&self.value(x), &self.value(w), &self.value(b))?;
        let needs = self.needs_grad(x) || self.needs_grad(w) || self.needs_grad(b);
        Ok(self.push(v, needs, Op::Dense { x, w, b }))
    }

    pub fn global_avg_pool(&self, x: Var) -> TensorResult<Var> {
        let v = ops::global_avg_pool(&self.value(x))?;
        Ok(self.unary(x, v, Op::GlobalAvgPool(x)))
    }

    pub fn softmax(&self, x: Var, axis: usize) -> TensorResult<Var> {
        let v = ops::softmax_axis(&self.value(x), axis)?;
        Ok(self.unary(x, v, Op::Softmax { x, axis }))
    }

    pub fn log_softmax(&self, x: Var, axis: usize) -> TensorResult<Var> {
        let v = ops::log_softmax_axis(&self.value(x), axis)?;
        Ok(self.unary(x, v, Op::LogSoftmax { x, axis }))
    }

    /// Total sum, emitted as a rank-1 scalar `[1]`.
    pub fn sum(&self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.unary(x, v, Op::Sum(x))
    }

    /// Row-wise pick from a `[N,K]` tensor: out[n] = x[n, indices[n]].
    pub fn gather_rows(&self, x: Var, indices: &[usize]) -> TensorResult<Var> {
        let vx = self.value(x);
        if vx.rank() != 2 {
            return Err(TensorError::InvalidArgument {
                context: "gather_rows",
                message: format!("expected rank-2 input, got {:?}", vx.shape()),
            });
        }
        let (n, k) = (vx.shape()[0], vx.shape()[1]);
        if indices.len() != n {
            return Err(TensorError::DimMismatch {
                context: "gather_rows",
                axis: 0,
                left: n,
                right: indices.len(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(TensorError::InvalidArgument {
                context: "gather_rows",
                message: format!("index {bad} out of range for row width {k}"),
            });
        }
        let data = indices
            .iter()
            .enumerate()
            .map(|(row, &i)| vx.data()[row * k + i])
            .collect();
        let v = Tensor::from_vec(&[n], data)?;
        Ok(self.unary(
            x,
            v,
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> TensorResult<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.unary(x, v, Op::Reshape(x)))
    }

    /// Reverse sweep from a scalar loss. Returns per-leaf gradients;
    /// leaves unreachable from the loss stay disconnected (zero on read).
    pub fn backward(&self, loss: Var) -> TensorResult<Gradients<E>> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                numel: loss_node.value.numel(),
            });
        }

        let mut grads: Vec<Option<Tensor<E>>> = (0..nodes.len()).map(|_| None).collect();
        if loss_node.needs_grad {
            grads[loss.0] = Some(Tensor::ones(loss_node.value.shape()));
        }

        for id in (0..=loss.0).rev() {
            if !nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].clone() else {
                continue;
            };
            let node = &nodes[id];
            let needs = |v: Var| nodes[v.0].needs_grad;
            let mut acc = |v: Var, contribution: Tensor<E>| {
                if !needs(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => {
                        debug_assert_eq!(existing.shape(), contribution.shape());
                        let dst = existing.data_mut();
                        for (d, s) in dst.iter_mut().zip(contribution.data()) {
                            *d = *d + *s;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            };

            match &node.op {
                Op::Leaf => {}
                Op::Relu(x) => {
                    let vx = &nodes[x.0].value;
                    let gx = Tensor::from_fn(vx.shape(), |i| {
                        if vx.data()[i] > E::zero() {
                            g.data()[i]
                        } else {
                            E::zero()
                        }
                    });
                    acc(*x, gx);
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let gx = Tensor::from_fn(y.shape(), |i| {
                        let yi = y.data()[i];
                        g.data()[i] * yi * (E::one() - yi)
                    });
                    acc(*x, gx);
                }
                Op::Exp(x) => {
                    let y = &node.value;
                    let gx = Tensor::from_fn(y.shape(), |i| g.data()[i] * y.data()[i]);
                    acc(*x, gx);
                }
                Op::Add(a, b) => {
                    acc(*a, g.reduce_to_shape(nodes[a.0].value.shape()));
                    acc(*b, g.reduce_to_shape(nodes[b.0].value.shape()));
                }
                Op::Sub(a, b) => {
                    acc(*a, g.reduce_to_shape(nodes[a.0].value.shape()));
                    acc(
                        *b,
                        g.map(|v| -v).reduce_to_shape(nodes[b.0].value.shape()),
                    );
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    if needs(*a) {
                        let t = g.broadcast_with(vb, "mul backward", |x, y| x * y)?;
                        acc(*a, t.reduce_to_shape(va.shape()));
                    }
                    if needs(*b) {
                        let t = g.broadcast_with(va, "mul backward", |x, y| x * y)?;
                        acc(*b, t.reduce_to_shape(vb.shape()));
                    }
                }
                Op::Min(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let ga = Tensor::from_fn(va.shape(), |i| {
                        if va.data()[i] <= vb.data()[i] {
                            g.data()[i]
                        } else {
                            E::zero()
                        }
                    });
                    let gb = Tensor::from_fn(vb.shape(), |i| {
                        if va.data()[i] <= vb.data()[i] {
                            E::zero()
                        } else {
                            g.data()[i]
                        }
                    });
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    acc(*x, g.map(|v| v * c));
                }
                Op::Clamp(x, lo, hi) => {
                    let vx = &nodes[x.0].value;
                    let (lo, hi) = (*lo, *hi);
                    let gx = Tensor::from_fn(vx.shape(), |i| {
                        let v = vx.data()[i];
                        if v > lo && v < hi {
                            g.data()[i]
                        } else {
                            E::zero()
                        }
                    });
                    acc(*x, gx);
                }
                Op::Conv2d { x, w, b, geo } => {
                    let (gi, gk, gb) = conv2d_backward(
                        &nodes[x.0].value,
                        &nodes[w.0].value,
                        &g,
                        *geo,
                        needs(*x),
                        needs(*w) || needs(*b),
                    );
                    if let Some(gi) = gi {
                        acc(*x, gi);
                    }
                    if let Some(gk) = gk {
                        acc(*w, gk);
                    }
                    if let Some(gb) = gb {
                        acc(*b, gb);
                    }
                }
                Op::Dense { x, w, b } => {
                    let (gx, gw, gb) = ops::dense_backward(
                        &nodes[x.0].value,
                        &nodes[w.0].value,
                        &g,
                        needs(*x),
                        needs(*w) || needs(*b),
                    );
                    if let Some(gx) = gx {
                        acc(*x, gx);
                    }
                    if let Some(gw) = gw {
                        acc(*w, gw);
                    }
                    if let Some(gb) = gb {
                        acc(*b, gb);
                    }
                }
                Op::GlobalAvgPool(x) => {
                    let vx = &nodes[x.0].value;
                    let (h, w) = (vx.shape()[2], vx.shape()[3]);
                    let plane = h * w;
                    let inv = E::from_f64(1.0 / plane as f64);
                    let gx = Tensor::from_fn(vx.shape(), |i| g.data()[i / plane] * inv);
                    acc(*x, gx);
                }
                Op::Softmax { x, axis } => {
                    let y = &node.value;
                    let (outer, len, inner) = axis_split(y.shape(), *axis)?;
                    let mut gx = vec![E::zero(); y.numel()];
                    for oi in 0..outer {
                        for ii in 0..inner {
                            let base = oi * len * inner + ii;
                            let mut dot = E::zero();
                            for j in 0..len {
                                let idx = base + j * inner;
                                dot = dot + g.data()[idx] * y.data()[idx];
                            }
                            for j in 0..len {
                                let idx = base + j * inner;
                                gx[idx] = y.data()[idx] * (g.data()[idx] - dot);
                            }
                        }
                    }
                    acc(*x, Tensor::from_vec(y.shape(), gx)?);
                }
                Op::LogSoftmax { x, axis } => {
                    let y = &node.value;
                    let (outer, len, inner) = axis_split(y.shape(), *axis)?;
                    let mut gx = vec![E::zero(); y.numel()];
                    for oi in 0..outer {
                        for ii in 0..inner {
                            let base = oi * len * inner + ii;
                            let mut g_sum = E::zero();
                            for j in 0..len {
                                g_sum = g_sum + g.data()[base + j * inner];
                            }
                            for j in 0..len {
                                let idx = base + j * inner;
                                gx[idx] = g.data()[idx] - y.data()[idx].exp() * g_sum;
                            }
                        }
                    }
                    acc(*x, Tensor::from_vec(y.shape(), gx)?);
                }
                Op::Sum(x) => {
                    let vx = &nodes[x.0].value;
                    acc(*x, Tensor::full(vx.shape(), g.item()));
                }
                Op::GatherRows { x, indices } => {
                    let vx = &nodes[x.0].value;
                    let k = vx.shape()[1];
                    let mut gx = vec![E::zero(); vx.numel()];
                    for (row, &i) in indices.iter().enumerate() {
                        gx[row * k + i] = gx[row * k + i] + g.data()[row];
                    }
                    acc(*x, Tensor::from_vec(vx.shape(), gx)?);
                }
                Op::Reshape(x) => {
                    acc(*x, g.reshape(nodes[x.0].value.shape())?);
                }
            }
        }

        let shapes = nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect::<Vec<_>>();
        Ok(Gradients { grads, shapes })
    }
}

/// Result of a backward sweep. A leaf that the loss does not depend on is
/// `disconnected`; reading it yields zeros so optimizers can proceed.
pub struct Gradients<E: Scalar = f32> {
    grads: Vec<Option<Tensor<E>>>,
    shapes: Vec<Vec<usize>>,
}

impl<E: Scalar> Gradients<E> {
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads[v.0].as_ref()
    }

    pub fn disconnected(&self, v: Var) -> bool {
        self.grads[v.0].is_none()
    }

    /// Gradient w.r.t. `v`, zeros when disconnected.
    pub fn wrt(&self, v: Var) -> Tensor<E> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}
