//! The recording tape and its differentiable operations.
//!
//! Broadcasting rule for the elementwise binary operations: shapes are
//! right-aligned and each aligned extent must match or be 1, and one of the
//! two operands must already have the full output shape. This covers the
//! scalar-vs-tensor and per-channel bias patterns (`(C,)` onto `(N, C)`,
//! `(C, 1, 1)` onto `(N, C, H, W)`); anything else needs an explicit
//! reshape.
//!
//! A tape supports exactly one backward pass. A second call returns
//! [`Error::TapeConsumed`]; build a fresh tape and re-run the forward pass.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{col2im_add, gemm, im2col, logabsdet, matrix_inverse};
use super::param::{ParamId, Parameter};
use super::{strides, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        k: usize,
    },
    Relu(usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Clamp(usize, f64, f64),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    LogSumExp(usize, usize),
    Sum(usize, usize),
    Mean(usize, usize),
    SumAll(usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    IndexSelect {
        x: usize,
        axis: usize,
        idx: Vec<usize>,
    },
    LogAbsDet(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softplus(_) => "softplus",
            Op::Clamp(..) => "clamp",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LogSumExp(..) => "logsumexp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAll(_) => "sum_all",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::Concat(..) => "concat",
            Op::Narrow { .. } => "narrow",
            Op::IndexSelect { .. } => "index_select",
            Op::LogAbsDet(_) => "logabsdet",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softplus(a)
            | Op::Clamp(a, ..)
            | Op::Softmax(a, _)
            | Op::LogSoftmax(a, _)
            | Op::LogSumExp(a, _)
            | Op::Sum(a, _)
            | Op::Mean(a, _)
            | Op::SumAll(a)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::LogAbsDet(a) => vec![*a],
            Op::Narrow { x, .. } | Op::IndexSelect { x, .. } => vec![*x],
            Op::Concat(xs, _) => xs.clone(),
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Record of a forward computation.
///
/// Single-threaded; build one tape per thread for data-parallel work.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, usize>>,
    frozen: RefCell<HashMap<ParamId, usize>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
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

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let inputs = op.inputs();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            if cfg!(debug_assertions) && !value.all_finite() {
                let finite_inputs = inputs.iter().all(|&i| nodes[i].value.all_finite());
                assert!(!finite_inputs, "{} produced non-finite values from finite inputs", op.name());
            }
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        let mut nodes = self.nodes.borrow_mut();
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

    fn push_leaf(&self, mut value: Tensor, requires_grad: bool) -> Var<'_> {
        value.grad = None;
        value.requires_grad = requires_grad;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf honoring `value.requires_grad`.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let rg = value.requires_grad;
        self.push_leaf(value, rg)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false)
    }

    /// Leaf whose gradient will be reported by [`Gradients::wrt`].
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, true)
    }

    /// Binds a parameter; repeated binds on one tape share a node.
    pub fn param(&self, p: &Parameter) -> Var<'_> {
        if let Some(&id) = self.params.borrow().get(&p.id()) {
            return Var { tape: self, id };
        }
        let v = self.push_leaf(p.value.clone(), true);
        self.params.borrow_mut().insert(p.id(), v.id);
        v
    }

    /// Binds a parameter as a constant (no gradient flows into it).
    pub fn frozen(&self, p: &Parameter) -> Var<'_> {
        if let Some(&id) = self.frozen.borrow().get(&p.id()) {
            return Var { tape: self, id };
        }
        let v = self.constant(p.value.clone());
        self.frozen.borrow_mut().insert(p.id(), v.id);
        v
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::Config("concat of nothing".into()))?;
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape()).collect();
        let rank = shapes[0].len();
        if axis >= rank {
            return Err(Error::Axis { op: "concat", axis, rank });
        }
        let mut out_shape = shapes[0].clone();
        out_shape[axis] = 0;
        for s in &shapes {
            let same_rest = s.len() == rank
                && s.iter().enumerate().all(|(i, &d)| i == axis || d == shapes[0][i]);
            if !same_rest {
                return Err(Error::shape("concat", &shapes[0], s));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        {
            let nodes = self.nodes.borrow();
            for o in 0..outer {
                for p in parts {
                    let v = &nodes[p.id].value;
                    let chunk = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                }
            }
        }
        let _ = first;
        Ok(self.push(
            Tensor::new(&out_shape, data)?,
            Op::Concat(parts.iter().map(|p| p.id).collect(), axis),
        ))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every `requires_grad` leaf gets a gradient, zero when `loss` does not
    /// depend on it. The tape is consumed.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if self.consumed.replace(true) {
            return Err(Error::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.id].value.shape().to_vec();
        if nodes[loss.id].value.numel() != 1 {
            self.consumed.set(false);
            return Err(Error::NonScalarLoss { shape: loss_shape });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            backprop(&nodes, id, &g, &mut grads)?;
        }
        let mut leaves = HashMap::new();
        let mut shapes = HashMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = grads
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                leaves.insert(id, g);
                shapes.insert(id, node.value.shape().to_vec());
            }
        }
        Ok(Gradients {
            leaves,
            shapes,
            params: self.params.borrow().clone(),
        })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    leaves: HashMap<usize, Vec<f64>>,
    shapes: HashMap<usize, Vec<usize>>,
    params: HashMap<ParamId, usize>,
}

impl Gradients {
    /// Gradient with respect to a leaf created on the tape.
    pub fn wrt(&self, v: &Var<'_>) -> Option<Tensor> {
        let g = self.leaves.get(&v.id)?;
        Tensor::new(&self.shapes[&v.id], g.clone()).ok()
    }

    pub fn param(&self, p: &Parameter) -> Option<&[f64]> {
        let id = self.params.get(&p.id())?;
        self.leaves.get(id).map(Vec::as_slice)
    }

    /// Stores gradients into each parameter's grad slot; parameters never
    /// bound on the tape receive zeros.
    pub fn store(&self, params: Vec<&mut Parameter>) {
        for p in params {
            let g = self
                .param(p)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.value.numel()]);
            p.value.grad = Some(g);
        }
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], id: usize, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = grads[id].get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

enum Bcast {
    Same,
    Scalar,
    Map(Vec<usize>),
}

impl Bcast {
    fn plan(out: &[usize], inp: &[usize]) -> Self {
        if out == inp {
            return Bcast::Same;
        }
        if inp.iter().product::<usize>() == 1 {
            return Bcast::Scalar;
        }
        let r = out.len();
        let pad = r - inp.len();
        let ostr = strides(out);
        let istr = strides(inp);
        let n: usize = out.iter().product();
        let mut map = Vec::with_capacity(n);
        for o in 0..n {
            let mut off = 0;
            for d in pad..r {
                let ext = inp[d - pad];
                if ext != 1 {
                    off += ((o / ostr[d]) % out[d]) * istr[d - pad];
                }
            }
            map.push(off);
        }
        Bcast::Map(map)
    }

    #[inline]
    fn at(&self, o: usize) -> usize {
        match self {
            Bcast::Same => o,
            Bcast::Scalar => 0,
            Bcast::Map(m) => m[o],
        }
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::shape(op, a, b));
        };
    }
    if out != a && out != b {
        return Err(Error::shape(op, a, b));
    }
    Ok(out)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn removed_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn softmax_lanes(x: &Tensor, axis: usize, log: bool) -> Tensor {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let m = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = (0..len).map(|j| (src[at(j)] - m).exp()).sum();
            let lse = m + s.ln();
            for j in 0..len {
                out[at(j)] = if log { src[at(j)] - lse } else { (src[at(j)] - m).exp() / s };
            }
        }
    }
    Tensor::new(x.shape(), out).unwrap()
}

fn permute_data(src: &Tensor, perm: &[usize]) -> Tensor {
    let shape = src.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_str = strides(shape);
    // stride in the source for each output dim
    let str_p: Vec<usize> = perm.iter().map(|&p| in_str[p]).collect();
    let n = src.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let data = src.data();
    let mut off = 0usize;
    for _ in 0..n {
        out.push(data[off]);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            off += str_p[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= str_p[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(&out_shape, out).unwrap()
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Owned copy of the value without gradient bookkeeping.
    pub fn tensor(&self) -> Tensor {
        let mut t = (*self.value()).clone();
        t.requires_grad = false;
        t
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value as a new constant leaf: gradients stop here.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.tensor())
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.value().map(f);
        self.tape.push(v, op)
    }

    fn binary(self, other: Var<'t>, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let out_shape = broadcast_shape(name, a.shape(), b.shape())?;
        let ma = Bcast::plan(&out_shape, a.shape());
        let mb = Bcast::plan(&out_shape, b.shape());
        let n: usize = out_shape.iter().product();
        let (ad, bd) = (a.data(), b.data());
        let data = (0..n).map(|o| f(ad[ma.at(o)], bd[mb.at(o)])).collect();
        Ok(self.tape.push(Tensor::new(&out_shape, data)?, op))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add(self.id, other.id), "add", |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub(self.id, other.id), "sub", |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul(self.id, other.id), "mul", |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        if other.value().data().contains(&0.0) {
            return Err(Error::domain("div", "division by zero"));
        }
        self.binary(other, Op::Div(self.id, other.id), "div", |a, b| a / b)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |a| -a)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |a| a * c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |a| a + c)
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self).expect("same shape")
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |a| a.max(0.0))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn log(self) -> Result<Var<'t>> {
        if let Some(bad) = self.value().data().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::domain("log", format!("non-positive input {bad}")));
        }
        Ok(self.unary(Op::Log(self.id), f64::ln))
    }

    /// `log(1 + exp(x))`, computed stably.
    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), |a| a.max(0.0) + (-a.abs()).exp().ln_1p())
    }

    /// Elementwise clamp to `[lo, hi]`; zero gradient outside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp(self.id, lo, hi), |a| a.clamp(lo, hi))
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<()> {
        let rank = self.shape().len();
        if axis >= rank {
            return Err(Error::Axis { op, axis, rank });
        }
        Ok(())
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        self.check_axis("softmax", axis)?;
        let v = softmax_lanes(&self.value(), axis, false);
        Ok(self.tape.push(v, Op::Softmax(self.id, axis)))
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        self.check_axis("log_softmax", axis)?;
        let v = softmax_lanes(&self.value(), axis, true);
        Ok(self.tape.push(v, Op::LogSoftmax(self.id, axis)))
    }

    /// Reduces `axis` away.
    pub fn logsumexp(self, axis: usize) -> Result<Var<'t>> {
        self.check_axis("logsumexp", axis)?;
        let x = self.value();
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let src = x.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let m = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = (0..len).map(|j| (src[at(j)] - m).exp()).sum();
                out[o * inner + i] = m + s.ln();
            }
        }
        let t = Tensor::new(&removed_axis(x.shape(), axis), out)?;
        Ok(self.tape.push(t, Op::LogSumExp(self.id, axis)))
    }

    fn reduce(self, axis: usize, mean: bool) -> Result<Var<'t>> {
        self.check_axis("sum", axis)?;
        let x = self.value();
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let src = x.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &src[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let t = Tensor::new(&removed_axis(x.shape(), axis), out)?;
        let op = if mean { Op::Mean(self.id, axis) } else { Op::Sum(self.id, axis) };
        Ok(self.tape.push(t, op))
    }

    /// Sums over `axis`, removing it.
    pub fn sum(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(axis, false)
    }

    pub fn mean(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(axis, true)
    }

    pub fn sum_all(self) -> Var<'t> {
        let s = self.value().sum();
        self.tape.push(Tensor::scalar(s), Op::SumAll(self.id))
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sums everything except the leading (batch) axis: (N, ...) -> (N,).
    pub fn sum_per_sample(self) -> Result<Var<'t>> {
        let s = self.shape();
        let per: usize = s[1..].iter().product();
        self.reshape(&[s[0], per])?.sum(1)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let t = self.value().reshape(shape)?;
        Ok(self.tape.push(t, Op::Reshape(self.id)))
    }

    /// Flattens all but the leading axis.
    pub fn flatten(self) -> Result<Var<'t>> {
        let s = self.shape();
        self.reshape(&[s[0], s[1..].iter().product()])
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &shape, perm));
        }
        let t = permute_data(&self.value(), perm);
        Ok(self.tape.push(t, Op::Permute(self.id, perm.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::Axis { op: "transpose", axis: 1, rank: r });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        self.check_axis("narrow", axis)?;
        let x = self.value();
        let shape = x.shape();
        if len == 0 || start + len > shape[axis] {
            return Err(Error::shape("narrow", shape, &[start, len]));
        }
        let (outer, full, inner) = axis_split(shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        Ok(self.tape.push(Tensor::new(&out_shape, data)?, Op::Narrow { x: self.id, axis, start }))
    }

    /// Splits `axis` into consecutive pieces of the given sizes.
    pub fn split(self, axis: usize, sizes: &[usize]) -> Result<Vec<Var<'t>>> {
        let total: usize = sizes.iter().sum();
        let shape = self.shape();
        if axis >= shape.len() || total != shape[axis] {
            return Err(Error::shape("split", &shape, sizes));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&s| {
                let v = self.narrow(axis, start, s);
                start += s;
                v
            })
            .collect()
    }

    /// Gathers entries along `axis`; `gather_rows` is the axis-0 case.
    pub fn index_select(self, axis: usize, idx: &[usize]) -> Result<Var<'t>> {
        self.check_axis("index_select", axis)?;
        let x = self.value();
        let shape = x.shape();
        if idx.is_empty() || idx.iter().any(|&i| i >= shape[axis]) {
            return Err(Error::shape("index_select", shape, idx));
        }
        let (outer, full, inner) = axis_split(shape, axis);
        let mut data = Vec::with_capacity(outer * idx.len() * inner);
        for o in 0..outer {
            for &i in idx {
                let base = (o * full + i) * inner;
                data.extend_from_slice(&x.data()[base..base + inner]);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = idx.len();
        Ok(self.tape.push(
            Tensor::new(&out_shape, data)?,
            Op::IndexSelect {
                x: self.id,
                axis,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        self.index_select(0, idx)
    }

    /// (m, k) x (k, n) matrix product.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut c);
        Ok(self.tape.push(Tensor::new(&[m, n], c)?, Op::MatMul(self.id, other.id)))
    }

    /// Stride-1 "same" convolution of (N, Cin, H, W) with a (Cout, Cin, k, k)
    /// kernel, k in {1, 3}, plus an optional (Cout,) bias.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let x = self.value();
        let w = weight.value();
        let (sx, sw) = (x.shape(), w.shape());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || !(sw[2] == 1 || sw[2] == 3) {
            return Err(Error::shape("conv2d", sx, sw));
        }
        let (n, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, k) = (sw[0], sw[2]);
        let bv = bias.map(|b| b.value());
        if let Some(b) = &bv {
            if b.shape() != [cout] {
                return Err(Error::shape("conv2d bias", b.shape(), &[cout]));
            }
        }
        let hw = h * wd;
        let ckk = cin * k * k;
        let mut out = vec![0.0; n * cout * hw];
        let mut cols = if k == 1 { Vec::new() } else { vec![0.0; ckk * hw] };
        for i in 0..n {
            let img = &x.data()[i * cin * hw..(i + 1) * cin * hw];
            let patches: &[f64] = if k == 1 {
                img
            } else {
                im2col(img, cin, h, wd, k, &mut cols);
                &cols
            };
            let o = &mut out[i * cout * hw..(i + 1) * cout * hw];
            gemm(cout, ckk, hw, w.data(), false, patches, false, 0.0, o);
            if let Some(b) = &bv {
                for (c, plane) in o.chunks_mut(hw).enumerate() {
                    let bc = b.data()[c];
                    plane.iter_mut().for_each(|v| *v += bc);
                }
            }
        }
        Ok(self.tape.push(
            Tensor::new(&[n, cout, h, wd], out)?,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                k,
            },
        ))
    }

    /// `log|det W|` of a square matrix, as a (1,) tensor.
    pub fn logabsdet(self) -> Result<Var<'t>> {
        let w = self.value();
        let s = w.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::shape("logabsdet", s, &[s[0], s[0]]));
        }
        let v = logabsdet(s[0], w.data())?;
        Ok(self.tape.push(Tensor::scalar(v), Op::LogAbsDet(self.id)))
    }
}

/// Sums `g` (laid out in `out_shape`) down to `in_shape` under the broadcast rule.
fn reduce_to(g: &[f64], out_shape: &[usize], in_shape: &[usize], sign: f64, dst: &mut [f64]) {
    match Bcast::plan(out_shape, in_shape) {
        Bcast::Same => dst.iter_mut().zip(g).for_each(|(d, v)| *d += sign * v),
        Bcast::Scalar => dst[0] += sign * g.iter().sum::<f64>(),
        Bcast::Map(m) => {
            for (o, v) in g.iter().enumerate() {
                dst[m[o]] += sign * v;
            }
        }
    }
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
    let node = &nodes[id];
    let out = &node.value;
    let rg = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign_b = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            for (i, sign) in [(*a, 1.0), (*b, sign_b)] {
                if rg(i) {
                    let n = val(i).numel();
                    let s = val(i).shape().to_vec();
                    add_into(grads, i, n, |d| reduce_to(g, out.shape(), &s, sign, d));
                }
            }
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let is_div = matches!(node.op, Op::Div(..));
            let (va, vb) = (val(*a), val(*b));
            let ma = Bcast::plan(out.shape(), va.shape());
            let mb = Bcast::plan(out.shape(), vb.shape());
            if rg(*a) {
                let mut tmp = vec![0.0; va.numel()];
                for (o, gv) in g.iter().enumerate() {
                    let bv = vb.data()[mb.at(o)];
                    tmp[ma.at(o)] += if is_div { gv / bv } else { gv * bv };
                }
                add_into(grads, *a, va.numel(), |d| d.iter_mut().zip(&tmp).for_each(|(x, y)| *x += y));
            }
            if rg(*b) {
                let mut tmp = vec![0.0; vb.numel()];
                for (o, gv) in g.iter().enumerate() {
                    let av = va.data()[ma.at(o)];
                    let bv = vb.data()[mb.at(o)];
                    tmp[mb.at(o)] += if is_div { -gv * av / (bv * bv) } else { gv * av };
                }
                add_into(grads, *b, vb.numel(), |d| d.iter_mut().zip(&tmp).for_each(|(x, y)| *x += y));
            }
        }
        Op::Neg(a) => add_into(grads, *a, g.len(), |d| d.iter_mut().zip(g).for_each(|(x, v)| *x -= v)),
        Op::Scale(a, c) => add_into(grads, *a, g.len(), |d| d.iter_mut().zip(g).for_each(|(x, v)| *x += c * v)),
        Op::AddScalar(a) | Op::Reshape(a) => {
            add_into(grads, *a, g.len(), |d| d.iter_mut().zip(g).for_each(|(x, v)| *x += v))
        }
        Op::Relu(a) => {
            let x = val(*a).data();
            add_into(grads, *a, g.len(), |d| {
                for ((dv, gv), xv) in d.iter_mut().zip(g).zip(x) {
                    if *xv > 0.0 {
                        *dv += gv;
                    }
                }
            })
        }
        Op::Exp(a) => add_into(grads, *a, g.len(), |d| {
            for ((dv, gv), yv) in d.iter_mut().zip(g).zip(out.data()) {
                *dv += gv * yv;
            }
        }),
        Op::Log(a) => {
            let x = val(*a).data();
            add_into(grads, *a, g.len(), |d| {
                for ((dv, gv), xv) in d.iter_mut().zip(g).zip(x) {
                    *dv += gv / xv;
                }
            })
        }
        Op::Softplus(a) => {
            let x = val(*a).data();
            add_into(grads, *a, g.len(), |d| {
                for ((dv, gv), xv) in d.iter_mut().zip(g).zip(x) {
                    *dv += gv / (1.0 + (-xv).exp());
                }
            })
        }
        Op::Clamp(a, lo, hi) => {
            let x = val(*a).data();
            add_into(grads, *a, g.len(), |d| {
                for ((dv, gv), xv) in d.iter_mut().zip(g).zip(x) {
                    if *xv >= *lo && *xv <= *hi {
                        *dv += gv;
                    }
                }
            })
        }
        Op::Softmax(a, axis) | Op::LogSoftmax(a, axis) => {
            let log = matches!(node.op, Op::LogSoftmax(..));
            let (outer, len, inner) = axis_split(out.shape(), *axis);
            let y = out.data();
            add_into(grads, *a, g.len(), |d| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        if log {
                            let gs: f64 = (0..len).map(|j| g[at(j)]).sum();
                            for j in 0..len {
                                d[at(j)] += g[at(j)] - y[at(j)].exp() * gs;
                            }
                        } else {
                            let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                d[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            })
        }
        Op::LogSumExp(a, axis) => {
            let x = val(*a);
            let (outer, len, inner) = axis_split(x.shape(), *axis);
            let xs = x.data();
            let lse = out.data();
            add_into(grads, *a, x.numel(), |d| {
                for o in 0..outer {
                    for i in 0..inner {
                        let r = o * inner + i;
                        for j in 0..len {
                            let at = (o * len + j) * inner + i;
                            d[at] += g[r] * (xs[at] - lse[r]).exp();
                        }
                    }
                }
            })
        }
        Op::Sum(a, axis) | Op::Mean(a, axis) => {
            let x = val(*a);
            let (outer, len, inner) = axis_split(x.shape(), *axis);
            let f = if matches!(node.op, Op::Mean(..)) { 1.0 / len as f64 } else { 1.0 };
            add_into(grads, *a, x.numel(), |d| {
                for o in 0..outer {
                    for j in 0..len {
                        let dst = &mut d[(o * len + j) * inner..(o * len + j + 1) * inner];
                        for (dv, gv) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *dv += f * gv;
                        }
                    }
                }
            })
        }
        Op::SumAll(a) => {
            let n = val(*a).numel();
            add_into(grads, *a, n, |d| d.iter_mut().for_each(|v| *v += g[0]))
        }
        Op::Permute(a, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let gt = permute_data(&Tensor::new(out.shape(), g.to_vec())?, &inv);
            add_into(grads, *a, g.len(), |d| d.iter_mut().zip(gt.data()).for_each(|(x, v)| *x += v))
        }
        Op::Concat(parts, axis) => {
            let (outer, total, inner) = axis_split(out.shape(), *axis);
            let mut offset = 0;
            for &p in parts {
                let len = val(p).shape()[*axis];
                if rg(p) {
                    add_into(grads, p, val(p).numel(), |d| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut d[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(x, v)| *x += v);
                        }
                    });
                }
                offset += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            let xs = val(*x).shape().to_vec();
            let (outer, full, inner) = axis_split(&xs, *axis);
            let len = out.shape()[*axis];
            add_into(grads, *x, val(*x).numel(), |d| {
                for o in 0..outer {
                    let dst = &mut d[(o * full + start) * inner..(o * full + start + len) * inner];
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
            })
        }
        Op::IndexSelect { x, axis, idx } => {
            let xs = val(*x).shape().to_vec();
            let (outer, full, inner) = axis_split(&xs, *axis);
            add_into(grads, *x, val(*x).numel(), |d| {
                for o in 0..outer {
                    for (k, &i) in idx.iter().enumerate() {
                        let dst = &mut d[(o * full + i) * inner..(o * full + i + 1) * inner];
                        let src = &g[(o * idx.len() + k) * inner..(o * idx.len() + k + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
            })
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
            if rg(*a) {
                add_into(grads, *a, m * k, |d| gemm(m, n, k, g, false, vb.data(), true, 1.0, d));
            }
            if rg(*b) {
                add_into(grads, *b, k * n, |d| gemm(k, m, n, va.data(), true, g, false, 1.0, d));
            }
        }
        Op::Conv2d { x, w, b, k } => {
            let (vx, vw) = (val(*x), val(*w));
            let s = vx.shape();
            let (n, cin, h, wd) = (s[0], s[1], s[2], s[3]);
            let cout = vw.shape()[0];
            let (hw, ckk) = (h * wd, cin * k * k);
            if let Some(bi) = b {
                if rg(*bi) {
                    add_into(grads, *bi, cout, |d| {
                        for i in 0..n {
                            for (c, dv) in d.iter_mut().enumerate() {
                                let base = (i * cout + c) * hw;
                                *dv += g[base..base + hw].iter().sum::<f64>();
                            }
                        }
                    });
                }
            }
            let mut cols = vec![0.0; ckk * hw];
            if rg(*w) {
                let mut dw = vec![0.0; cout * ckk];
                for i in 0..n {
                    let img = &vx.data()[i * cin * hw..(i + 1) * cin * hw];
                    let patches: &[f64] = if *k == 1 {
                        img
                    } else {
                        im2col(img, cin, h, wd, *k, &mut cols);
                        &cols
                    };
                    let gi = &g[i * cout * hw..(i + 1) * cout * hw];
                    gemm(cout, hw, ckk, gi, false, patches, true, 1.0, &mut dw);
                }
                add_into(grads, *w, cout * ckk, |d| d.iter_mut().zip(&dw).for_each(|(a, v)| *a += v));
            }
            if rg(*x) {
                add_into(grads, *x, vx.numel(), |d| {
                    for i in 0..n {
                        let gi = &g[i * cout * hw..(i + 1) * cout * hw];
                        let dst = &mut d[i * cin * hw..(i + 1) * cin * hw];
                        if *k == 1 {
                            gemm(cin, cout, hw, vw.data(), true, gi, false, 1.0, dst);
                        } else {
                            gemm(ckk, cout, hw, vw.data(), true, gi, false, 0.0, &mut cols);
                            col2im_add(&cols, cin, h, wd, *k, dst);
                        }
                    }
                });
            }
        }
        Op::LogAbsDet(a) => {
            let w = val(*a);
            let n = w.shape()[0];
            let inv = matrix_inverse(n, w.data())?;
            // d log|det W| / dW = W^{-T}
            add_into(grads, *a, n * n, |d| {
                for i in 0..n {
                    for j in 0..n {
                        d[i * n + j] += g[0] * inv[j * n + i];
                    }
                }
            })
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3]));
        let y = x.softmax(0).unwrap().tensor();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let tape = Tape::new();
        let x = t(&[2, 3], &[0.3, -1.2, 2.0, 5.0, 5.5, -3.0]);
        let a = tape.constant(x.clone()).softmax(1).unwrap().tensor();
        let b = tape.constant(x.map(|v| v + 17.25)).softmax(1).unwrap().tensor();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-14);
    }

    #[test]
    fn sum_grad_is_ones() {
        let tape = Tape::new();
        let x = tape.variable(t(&[5], &[1., -2., 3., 0.5, 9.]));
        let loss = x.sum_all();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[1.0; 5]);
    }

    #[test]
    fn square_sum_grad() {
        let tape = Tape::new();
        let x = tape.variable(t(&[3], &[1., 2., 3.]));
        let loss = x.mul(x).unwrap().sum_all();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[2., 4., 6.]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.variable(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn second_backward_errors() {
        let tape = Tape::new();
        let x = tape.variable(Tensor::ones(&[2]));
        let l = x.sum_all();
        tape.backward(l).unwrap();
        assert!(matches!(tape.backward(l), Err(Error::TapeConsumed)));
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let tape = Tape::new();
        let x = tape.variable(Tensor::ones(&[2]));
        let y = tape.variable(Tensor::ones(&[3]));
        let g = tape.backward(x.sum_all()).unwrap();
        assert_eq!(g.wrt(&y).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn broadcast_rules() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[2, 3, 4, 4]));
        let per_channel = tape.constant(Tensor::ones(&[3, 1, 1]));
        assert_eq!(x.add(per_channel).unwrap().shape(), vec![2, 3, 4, 4]);
        let s = tape.scalar(2.0);
        assert_eq!(s.mul(x).unwrap().shape(), vec![2, 3, 4, 4]);
        let bad = tape.constant(Tensor::ones(&[2, 3]));
        let err = x.add(bad).unwrap_err().to_string();
        assert!(err.contains("[2, 3, 4, 4]") && err.contains("[2, 3]"), "{err}");
        // neither operand carries the full output shape
        let a = tape.constant(Tensor::ones(&[2, 1]));
        let b = tape.constant(Tensor::ones(&[1, 3]));
        assert!(a.add(b).is_err());
    }

    #[test]
    fn domain_errors() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(x.log(), Err(Error::Domain { .. })));
        let one = tape.constant(Tensor::ones(&[2]));
        assert!(matches!(one.div(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn permute_round_trip() {
        let tape = Tape::new();
        let x = t(&[2, 3, 4], &(0..24).map(|v| v as f64).collect::<Vec<_>>());
        let v = tape.constant(x.clone());
        let p = v.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), vec![4, 2, 3]);
        // element (i,j,k) of x lands at (k,i,j)
        assert_eq!(p.value().data()[(3 * 2 + 1) * 3 + 2], x.data()[(1 * 3 + 2) * 4 + 3]);
        let back = p.permute(&[1, 2, 0]).unwrap().tensor();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn concat_and_split_invert() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 5], &(0..10).map(|v| v as f64).collect::<Vec<_>>()));
        let parts = x.split(1, &[2, 3]).unwrap();
        assert_eq!(parts[0].tensor().data(), &[0., 1., 5., 6.]);
        let y = tape.concat(&parts, 1).unwrap();
        assert_eq!(y.tensor().data(), x.tensor().data());
    }

    #[test]
    fn conv_identity_kernel() {
        let tape = Tape::new();
        let x = t(&[1, 1, 3, 3], &(0..9).map(|v| v as f64).collect::<Vec<_>>());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = tape.constant(t(&[1, 1, 3, 3], &k));
        let y = tape.constant(x.clone()).conv2d(w, None).unwrap();
        assert_eq!(y.tensor().data(), x.data());
    }
}
