//! Reverse-mode differentiation over an append-only arena of tensor nodes.
//!
//! Every operation appends its result to the tape and returns a [`Var`]
//! handle. Nodes are only ever appended, so arena order is a topological
//! order and [`Tape::backward`] is a single reverse sweep. Values are never
//! mutated after they are recorded.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::{gemm, MatView, Real};
use crate::tensor::{axis_split, broadcast_shapes, for_each_broadcast, strides, Tensor};

/// Smallest denominator magnitude accepted by `div` and `reciprocal`.
pub const MIN_DENOMINATOR: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Square,
    Abs,
    Reciprocal,
    Sqrt,
    Exp,
    Sigmoid,
    Gelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    Scale(Var, T),
    Shift(Var),
    ClampMin(Var, T),
    MatMul(Var, Var),
    Softmax(Var, usize),
    NormalizeL2 { x: Var, axis: usize, eps: T },
    Reduce { x: Var, axis: usize, kind: ReduceOp, argmax: Vec<usize> },
    Reshape(Var),
    Permute(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Operation record for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `var`, if it was reached.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but returns zeros of `shape` when unreached.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor<T> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn check_finite<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis < shape.len() {
        Ok(())
    } else {
        Err(Error::Axis {
            op,
            axis,
            rank: shape.len(),
        })
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn gelu<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::one() + (x * T::from_f64(core::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (x * T::from_f64(core::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::from_f64(0.398_942_280_401_432_7);
    cdf + x * pdf
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients are only computed for leaves recorded with
    /// `requires_grad` and for nodes downstream of them.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copies the value of `x` into a fresh untracked leaf.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn value(&self, x: Var) -> &Tensor<T> {
        &self.nodes[x.0].value
    }

    pub fn shape(&self, x: Var) -> &[usize] {
        self.nodes[x.0].value.shape()
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.nodes[x.0].tracked
    }

    fn tracked(&self, xs: &[Var]) -> bool {
        xs.iter().any(|x| self.nodes[x.0].tracked)
    }

    // ---- elementwise -------------------------------------------------

    pub fn binary(&mut self, a: Var, b: Var, kind: BinaryOp) -> Result<Var> {
        let op_name = match kind {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        };
        let (va, vb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shapes(va.shape(), vb.shape())
            .ok_or_else(|| Error::shape(op_name, va.shape(), vb.shape()))?;
        if kind == BinaryOp::Div {
            let min = T::from_f64(MIN_DENOMINATOR);
            if vb.data().iter().any(|d| d.abs() < min) {
                return Err(Error::domain("div", "denominator magnitude below 1e-12"));
            }
        }
        let (da, db) = (va.data(), vb.data());
        let mut out = vec![T::zero(); out_shape.iter().product()];
        for_each_broadcast(&out_shape, va.shape(), vb.shape(), |o, ia, ib| {
            let (x, y) = (da[ia], db[ib]);
            out[o] = match kind {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
                BinaryOp::Div => x / y,
            };
        });
        let value = Tensor::new(out_shape, out)?;
        check_finite(op_name, &value)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Binary(kind, a, b), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Div)
    }

    pub fn unary(&mut self, x: Var, kind: UnaryOp) -> Result<Var> {
        let vx = self.value(x);
        let name = match kind {
            UnaryOp::Neg => "neg",
            UnaryOp::Square => "square",
            UnaryOp::Abs => "abs",
            UnaryOp::Reciprocal => "reciprocal",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Exp => "exp",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Gelu => "gelu",
        };
        match kind {
            UnaryOp::Reciprocal => {
                let min = T::from_f64(MIN_DENOMINATOR);
                if vx.data().iter().any(|d| d.abs() < min) {
                    return Err(Error::domain("reciprocal", "denominator magnitude below 1e-12"));
                }
            }
            UnaryOp::Sqrt
                if vx.data().iter().any(|&d| d < T::zero()) => {
                    return Err(Error::domain("sqrt", "negative argument"));
                }
            _ => {}
        }
        let value = vx.map(|v| match kind {
            UnaryOp::Neg => -v,
            UnaryOp::Square => v * v,
            UnaryOp::Abs => v.abs(),
            UnaryOp::Reciprocal => T::one() / v,
            UnaryOp::Sqrt => v.sqrt(),
            UnaryOp::Exp => v.exp(),
            UnaryOp::Sigmoid => sigmoid(v),
            UnaryOp::Gelu => gelu(v),
        });
        check_finite(name, &value)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Unary(kind, x), tracked))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Neg)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Square)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Abs)
    }

    pub fn reciprocal(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Reciprocal)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Sqrt)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Exp)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Sigmoid)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryOp::Gelu)
    }

    /// `x · c` for a constant `c`.
    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        check_finite("scale", &value)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Scale(x, c), tracked))
    }

    /// `x + c` for a constant `c`.
    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v + c);
        check_finite("add_scalar", &value)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Shift(x), tracked))
    }

    /// `max(x, c)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| if v > c { v } else { c });
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::ClampMin(x, c), tracked))
    }

    // ---- linear algebra ------------------------------------------------

    /// Batched matrix product `[.., m, k] × [.., k, n]` with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (batch_a, batch_b) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shapes(batch_a, batch_b).ok_or_else(|| Error::shape("matmul", sa, sb))?;
        let nbatch: usize = batch.iter().product();
        let mut out = vec![T::zero(); nbatch * m * n];
        let (da, db) = (va.data(), vb.data());
        if folds_into_rows(batch_a, batch_b, nbatch) {
            // shared right operand: one GEMM over all batch rows
            gemm(
                MatView { data: da, rows: nbatch * m, cols: k, transposed: false },
                MatView { data: db, rows: k, cols: n, transposed: false },
                &mut out,
                false,
            );
        } else {
            for_each_broadcast(&batch, batch_a, batch_b, |o, ia, ib| {
            gemm(
                MatView { data: &da[ia * m * k..(ia + 1) * m * k], rows: m, cols: k, transposed: false },
                MatView { data: &db[ib * k * n..(ib + 1) * k * n], rows: k, cols: n, transposed: false },
                &mut out[o * m * n..(o + 1) * m * n],
                false,
            );
            });
        }
        let mut shape = batch;
        shape.extend_from_slice(&[m, n]);
        let value = Tensor::new(shape, out)?;
        check_finite("matmul", &value)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), tracked))
    }

    // ---- axis operations -----------------------------------------------

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        check_axis("softmax", vx.shape(), axis)?;
        let (outer, len, inner) = axis_split(vx.shape(), axis);
        let src = vx.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| src[at(i)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for i in 0..len {
                    let e = (src[at(i)] - max).exp();
                    out[at(i)] = e;
                    total = total + e;
                }
                for i in 0..len {
                    out[at(i)] = out[at(i)] / total;
                }
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        check_finite("softmax", &value)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Softmax(x, axis), tracked))
    }

    /// Divides every fiber along `axis` by its L2 norm plus `eps`.
    pub fn normalize_l2(&mut self, x: Var, axis: usize, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::domain("normalize_l2", "eps must be positive"));
        }
        let vx = self.value(x);
        check_axis("normalize_l2", vx.shape(), axis)?;
        let (outer, len, inner) = axis_split(vx.shape(), axis);
        let src = vx.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let norm = (0..len).map(|i| src[at(i)] * src[at(i)]).sum::<T>().sqrt();
                let denom = norm + eps;
                for i in 0..len {
                    out[at(i)] = src[at(i)] / denom;
                }
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        check_finite("normalize_l2", &value)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::NormalizeL2 { x, axis, eps }, tracked))
    }

    /// Reduction along `axis`; the axis is kept with extent 1.
    pub fn reduce(&mut self, x: Var, axis: usize, kind: ReduceOp) -> Result<Var> {
        let vx = self.value(x);
        check_axis("reduce", vx.shape(), axis)?;
        let (outer, len, inner) = axis_split(vx.shape(), axis);
        if len == 0 {
            return Err(Error::Contract("reduction over an empty axis".into()));
        }
        let src = vx.data();
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = Vec::new();
        if kind == ReduceOp::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let slot = o * inner + j;
                match kind {
                    ReduceOp::Sum | ReduceOp::Mean => {
                        let mut acc = T::zero();
                        for i in 0..len {
                            acc = acc + src[at(i)];
                        }
                        if kind == ReduceOp::Mean {
                            acc = acc / T::from_f64(len as f64);
                        }
                        out[slot] = acc;
                    }
                    ReduceOp::Max => {
                        let mut best = 0;
                        for i in 1..len {
                            if src[at(i)] > src[at(best)] {
                                best = i;
                            }
                        }
                        argmax[slot] = at(best);
                        out[slot] = src[at(best)];
                    }
                }
            }
        }
        let mut shape = vx.shape().to_vec();
        shape[axis] = 1;
        let value = Tensor::new(shape, out)?;
        check_finite("reduce", &value)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Reduce { x, axis, kind, argmax }, tracked))
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, ReduceOp::Sum)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, ReduceOp::Mean)
    }

    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, ReduceOp::Max)
    }

    /// Sum of every element as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, [n])?;
        let s = self.sum(flat, 0)?;
        self.reshape(s, [])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, [n])?;
        let s = self.mean(flat, 0)?;
        self.reshape(s, [])
    }

    // ---- layout ----------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Reshape(x), tracked))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let rank = vx.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || core::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", vx.shape(), axes));
        }
        let value = permute_tensor(vx, axes);
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Permute(x, axes.to_vec()), tracked))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let rank = self.value(x).rank();
        if rank < 2 {
            return Err(Error::Axis { op: "transpose_last", axis: 1, rank });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(x, &axes)
    }

    // ---- reverse sweep -----------------------------------------------------

    /// Gradients of a scalar `loss` with respect to every tracked leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.sweep(loss, false)
    }

    /// Like [`Tape::backward`] but also keeps gradients of intermediate nodes.
    pub fn backward_retain(&self, loss: Var) -> Result<Gradients<T>> {
        self.sweep(loss, true)
    }

    fn sweep(&self, loss: Var, retain: bool) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        if root.tracked {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            if retain || matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::new(self.nodes[i].value.shape().to_vec(), g).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (ta, tb) = (self.nodes[a.0].tracked, self.nodes[b.0].tracked);
                let mut ga = ta.then(|| vec![T::zero(); va.numel()]);
                let mut gb = tb.then(|| vec![T::zero(); vb.numel()]);
                let (da, db) = (va.data(), vb.data());
                for_each_broadcast(out.shape(), va.shape(), vb.shape(), |o, ia, ib| {
                    let go = g[o];
                    let (x, y) = (da[ia], db[ib]);
                    let (dx, dy) = match kind {
                        BinaryOp::Add => (go, go),
                        BinaryOp::Sub => (go, -go),
                        BinaryOp::Mul => (go * y, go * x),
                        BinaryOp::Div => (go / y, -go * x / (y * y)),
                    };
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] = ga[ia] + dx;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] = gb[ib] + dy;
                    }
                });
                if let Some(ga) = ga {
                    accumulate(grads, *a, &ga);
                }
                if let Some(gb) = gb {
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Unary(kind, x) => {
                let vx = self.value(*x).data();
                let y = out.data();
                let gx: Vec<T> = (0..g.len())
                    .map(|i| {
                        let d = match kind {
                            UnaryOp::Neg => -T::one(),
                            UnaryOp::Square => vx[i] + vx[i],
                            UnaryOp::Abs => {
                                if vx[i] > T::zero() {
                                    T::one()
                                } else if vx[i] < T::zero() {
                                    -T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryOp::Reciprocal => -y[i] * y[i],
                            // subgradient 0 at the origin
                            UnaryOp::Sqrt => {
                                if y[i] > T::zero() {
                                    T::one() / (y[i] + y[i])
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryOp::Exp => y[i],
                            UnaryOp::Sigmoid => y[i] * (T::one() - y[i]),
                            UnaryOp::Gelu => gelu_grad(vx[i]),
                        };
                        g[i] * d
                    })
                    .collect();
                accumulate(grads, *x, &gx);
            }
            Op::Scale(x, c) => {
                let gx: Vec<T> = g.iter().map(|&v| v * *c).collect();
                accumulate(grads, *x, &gx);
            }
            Op::Shift(x) => accumulate(grads, *x, g),
            Op::ClampMin(x, c) => {
                let vx = self.value(*x).data();
                let gx: Vec<T> = g
                    .iter()
                    .zip(vx)
                    .map(|(&gv, &xv)| if xv > *c { gv } else { T::zero() })
                    .collect();
                accumulate(grads, *x, &gx);
            }
            Op::MatMul(a, b) => self.matmul_backward(out, *a, *b, g, grads),
            Op::Softmax(x, axis) => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + j;
                        let dot: T = (0..len).map(|i| g[at(i)] * y[at(i)]).sum();
                        for i in 0..len {
                            gx[at(i)] = y[at(i)] * (g[at(i)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::NormalizeL2 { x, axis, eps } => {
                let src = self.value(*x).data();
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let mut gx = vec![T::zero(); src.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + j;
                        let norm = (0..len).map(|i| src[at(i)] * src[at(i)]).sum::<T>().sqrt();
                        let denom = norm + *eps;
                        let gdotx: T = (0..len).map(|i| g[at(i)] * src[at(i)]).sum();
                        let coupling = if norm > T::zero() {
                            gdotx / (norm * denom * denom)
                        } else {
                            T::zero()
                        };
                        for i in 0..len {
                            gx[at(i)] = g[at(i)] / denom - src[at(i)] * coupling;
                        }
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::Reduce { x, axis, kind, argmax } => {
                let shape = self.value(*x).shape();
                let (outer, len, inner) = axis_split(shape, *axis);
                let mut gx = vec![T::zero(); outer * len * inner];
                match kind {
                    ReduceOp::Sum | ReduceOp::Mean => {
                        let f = if *kind == ReduceOp::Mean {
                            T::one() / T::from_f64(len as f64)
                        } else {
                            T::one()
                        };
                        for o in 0..outer {
                            for i in 0..len {
                                for j in 0..inner {
                                    gx[(o * len + i) * inner + j] = g[o * inner + j] * f;
                                }
                            }
                        }
                    }
                    ReduceOp::Max => {
                        for (slot, &src) in argmax.iter().enumerate() {
                            gx[src] = g[slot];
                        }
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::Reshape(x) => accumulate(grads, *x, g),
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let gt = Tensor::new(out.shape().to_vec(), g.to_vec()).expect("grad shape");
                let back = permute_tensor(&gt, &inverse);
                accumulate(grads, *x, back.data());
            }
        }
    }

    fn matmul_backward(&self, out: &Tensor<T>, a: Var, b: Var, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (batch_a, batch_b) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = &out.shape()[..out.rank() - 2];
        let (ta, tb) = (self.nodes[a.0].tracked, self.nodes[b.0].tracked);
        let mut ga = ta.then(|| vec![T::zero(); va.numel()]);
        let mut gb = tb.then(|| vec![T::zero(); vb.numel()]);
        let (da, db) = (va.data(), vb.data());
        let nbatch: usize = batch.iter().product();
        if folds_into_rows(batch_a, batch_b, nbatch) {
            let rows = nbatch * m;
            if let Some(ga) = ga.as_mut() {
                gemm(
                    MatView { data: g, rows, cols: n, transposed: false },
                    MatView { data: db, rows: k, cols: n, transposed: true },
                    ga,
                    true,
                );
            }
            if let Some(gb) = gb.as_mut() {
                gemm(
                    MatView { data: da, rows, cols: k, transposed: true },
                    MatView { data: g, rows, cols: n, transposed: false },
                    gb,
                    true,
                );
            }
        } else {
        for_each_broadcast(batch, batch_a, batch_b, |o, ia, ib| {
            let go = &g[o * m * n..(o + 1) * m * n];
            if let Some(ga) = ga.as_mut() {
                // dA = G · Bᵀ
                gemm(
                    MatView { data: go, rows: m, cols: n, transposed: false },
                    MatView { data: &db[ib * k * n..(ib + 1) * k * n], rows: k, cols: n, transposed: true },
                    &mut ga[ia * m * k..(ia + 1) * m * k],
                    true,
                );
            }
            if let Some(gb) = gb.as_mut() {
                // dB = Aᵀ · G
                gemm(
                    MatView { data: &da[ia * m * k..(ia + 1) * m * k], rows: m, cols: k, transposed: true },
                    MatView { data: go, rows: m, cols: n, transposed: false },
                    &mut gb[ib * k * n..(ib + 1) * k * n],
                    true,
                );
            }
        });
        }
        if let Some(ga) = ga {
            accumulate(grads, a, &ga);
        }
        if let Some(gb) = gb {
            accumulate(grads, b, &gb);
        }
    }
}

/// A batched left operand against a single right matrix can be treated as
/// one tall matrix.
fn folds_into_rows(batch_a: &[usize], batch_b: &[usize], nbatch: usize) -> bool {
    batch_b.iter().product::<usize>() == 1 && batch_a.iter().product::<usize>() == nbatch
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], x: Var, g: &[T]) {
    match &mut grads[x.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &v)| *a = *a + v),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn permute_tensor<T: Real>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel = x.numel();
    let src = x.data();
    let mut out = Vec::with_capacity(numel);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..numel {
        out.push(src[flat]);
        let mut ax = rank;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            flat += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            flat -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permute preserves element count")
}
