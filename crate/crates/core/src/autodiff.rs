//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is rebuilt for every step: each operation appends a node
//! holding its output value and the handles of its inputs, and
//! [`Graph::backward`] replays the tape in reverse. Nodes are only ever
//! appended, so inputs always precede their consumers.
//!
//! Binary elementwise operations broadcast when one operand's shape is a
//! suffix of the other's (leading-axis broadcasting) or when one operand has
//! a single element. Anything else must be reshaped explicitly.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, S),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Tanh(Var),
    Sigmoid(Var),
    Elu(Var),
    Softplus(Var),
    Sqrt(Var),
    Square(Var),
    ClampMin(Var, S),
    Softmax(Var),
    LogSoftmax(Var),
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    Concat(Vec<Var>),
    ConcatRows(Vec<Var>),
    Slice(Var, usize, usize),
    SliceRows(Var, usize),
    Reshape(Var),
    Broadcast(Var),
    StopGrad,
    StraightThrough(Var),
    SquaredError(Var, Var),
}

#[derive(Debug, Clone)]
struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
}

/// Gradients of a scalar loss with respect to the parameters recorded in a
/// graph, indexed by parameter id.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMap<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> GradientMap<S> {
    pub fn from_entries(grads: Vec<Option<Tensor<S>>>) -> Self {
        Self { grads }
    }

    pub fn get(&self, param: usize) -> Option<&Tensor<S>> {
        self.grads.get(param).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor<S>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (i, g)))
    }

    /// Euclidean norm over every entry of every gradient.
    pub fn global_norm(&self) -> f64 {
        self.iter()
            .flat_map(|(_, g)| g.data().iter())
            .map(|v| {
                let v = v.to_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = S::from_f64(max_norm / norm);
            for g in self.grads.iter_mut().flatten() {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        norm
    }
}

/// A recording of tensor operations.
#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: RefCell<Vec<Node<S>>>,
}

fn shape_of_last(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let rows = if cols == 0 { 0 } else { numel(shape) / cols };
    (rows, cols)
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

/// Sums `g` (sized like the broadcast output) down to `n` elements.
fn reduce_to<S: Scalar>(g: &[S], n: usize) -> Vec<S> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![S::ZERO; n];
    for chunk in g.chunks(n) {
        add_into(&mut out, chunk);
    }
    out
}

impl<S: Scalar> Graph<S> {
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

    fn push(&self, shape: Vec<usize>, value: Vec<S>, op: Op<S>) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, value, op });
        Var(nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn data(&self, v: Var) -> Ref<'_, [S]> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].value.as_slice())
    }

    pub fn value(&self, v: Var) -> Tensor<S> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    pub fn item(&self, v: Var) -> S {
        self.nodes.borrow()[v.0].value[0]
    }

    // ---------------------------------------------------------------- leaves

    /// A leaf that receives no gradient.
    pub fn constant(&self, t: &Tensor<S>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
    }

    pub fn constant_vec(&self, shape: &[usize], data: Vec<S>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "constant",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf))
    }

    pub fn zeros(&self, shape: &[usize]) -> Var {
        self.push(shape.to_vec(), vec![S::ZERO; numel(shape)], Op::Leaf)
    }

    pub fn scalar(&self, v: S) -> Var {
        self.push(Vec::new(), vec![v], Op::Leaf)
    }

    /// A leaf whose gradient is reported under `id` by [`Graph::backward`].
    pub fn param(&self, id: usize, t: &Tensor<S>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param(id))
    }

    // ------------------------------------------------------------- helpers

    fn unary(&self, a: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            (n.shape.clone(), n.value.iter().map(|&x| f(x)).collect())
        };
        self.push(shape, value, op)
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let (la, lb) = (na.value.len(), nb.value.len());
            if la == lb && na.shape == nb.shape {
                let v = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y));
                (na.shape.clone(), v.collect::<Vec<_>>())
            } else if lb <= la && (lb == 1 || is_suffix(&nb.shape, &na.shape)) && lb > 0 {
                let mut v = Vec::with_capacity(la);
                for chunk in na.value.chunks(lb) {
                    v.extend(chunk.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)));
                }
                (na.shape.clone(), v)
            } else if la < lb && (la == 1 || is_suffix(&na.shape, &nb.shape)) && la > 0 {
                let mut v = Vec::with_capacity(lb);
                for chunk in nb.value.chunks(la) {
                    v.extend(na.value.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
                }
                (nb.shape.clone(), v)
            } else {
                return Err(Error::ShapeMismatch {
                    op: name,
                    lhs: na.shape.clone(),
                    rhs: nb.shape.clone(),
                });
            }
        };
        Ok(self.push(shape, value, op))
    }

    // ------------------------------------------------------------ catalog

    /// Matrix product of `[m,k]` and `[k,n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: na.shape.clone(),
                    rhs: nb.shape.clone(),
                });
            }
            let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
            let mut c = vec![S::ZERO; m * n];
            S::gemm(m, k, n, &na.value, false, &nb.value, false, &mut c, false);
            (vec![m, n], c)
        };
        Ok(self.push(shape, value, Op::MatMul(a, b)))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            if na.shape.len() != 2 {
                return Err(Error::ShapeMismatch {
                    op: "transpose",
                    lhs: na.shape.clone(),
                    rhs: Vec::new(),
                });
            }
            let (r, c) = (na.shape[0], na.shape[1]);
            let mut v = vec![S::ZERO; r * c];
            for i in 0..r {
                for j in 0..c {
                    v[j * r + i] = na.value[i * c + j];
                }
            }
            (vec![c, r], v)
        };
        Ok(self.push(shape, value, Op::Transpose(a)))
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

    pub fn neg(&self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&self, a: Var, s: S) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&self, a: Var, s: S) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, S::exp, Op::Exp(a))
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, S::ln, Op::Ln(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, S::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn elu(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x > S::ZERO { x } else { x.exp() - S::ONE },
            Op::Elu(a),
        )
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, S::sqrt, Op::Sqrt(a))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&self, a: Var, floor: S) -> Var {
        self.unary(a, |x| x.max(floor), Op::ClampMin(a, floor))
    }

    fn last_axis(&self, a: Var, log: bool) -> Var {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let (_, cols) = shape_of_last(&na.shape);
            let mut out = Vec::with_capacity(na.value.len());
            for row in na.value.chunks(cols.max(1)) {
                let m = row.iter().fold(row[0], |acc, &x| acc.max(x));
                let z: S = row.iter().map(|&x| (x - m).exp()).sum();
                if log {
                    let lz = z.ln() + m;
                    out.extend(row.iter().map(|&x| x - lz));
                } else {
                    out.extend(row.iter().map(|&x| (x - m).exp() / z));
                }
            }
            (na.shape.clone(), out)
        };
        let op = if log { Op::LogSoftmax(a) } else { Op::Softmax(a) };
        self.push(shape, value, op)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, a: Var) -> Var {
        self.last_axis(a, false)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self, a: Var) -> Var {
        self.last_axis(a, true)
    }

    pub fn sum(&self, a: Var) -> Var {
        let s: S = self.data(a).iter().copied().sum();
        self.push(Vec::new(), vec![s], Op::SumAll(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let (s, n) = {
            let d = self.data(a);
            (d.iter().copied().sum::<S>(), d.len())
        };
        self.push(Vec::new(), vec![s / S::from_usize(n)], Op::MeanAll(a))
    }

    /// Sums the last axis away: `[.., n] -> [..]`.
    pub fn sum_last(&self, a: Var) -> Var {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let (_, cols) = shape_of_last(&na.shape);
            let v: Vec<S> = na
                .value
                .chunks(cols.max(1))
                .map(|r| r.iter().copied().sum())
                .collect();
            let mut shape = na.shape.clone();
            shape.pop();
            (shape, v)
        };
        self.push(shape, value, Op::SumLast(a))
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts[0].0];
            let lead = &first.shape[..first.shape.len() - 1];
            let (rows, _) = shape_of_last(&first.shape);
            let mut total = 0;
            for p in parts {
                let n = &nodes[p.0];
                if n.shape.len() != first.shape.len() || n.shape[..n.shape.len() - 1] != *lead {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: first.shape.clone(),
                        rhs: n.shape.clone(),
                    });
                }
                total += n.shape[n.shape.len() - 1];
            }
            let mut v = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    let n = &nodes[p.0];
                    let c = n.shape[n.shape.len() - 1];
                    v.extend_from_slice(&n.value[r * c..(r + 1) * c]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            (shape, v)
        };
        Ok(self.push(shape, value, Op::Concat(parts.to_vec())))
    }

    /// Concatenates along the first axis; trailing extents must agree.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts[0].0];
            let tail = &first.shape[1..];
            let mut rows = 0;
            let mut v = Vec::new();
            for p in parts {
                let n = &nodes[p.0];
                if n.shape.len() != first.shape.len() || n.shape[1..] != *tail {
                    return Err(Error::ShapeMismatch {
                        op: "concat_rows",
                        lhs: first.shape.clone(),
                        rhs: n.shape.clone(),
                    });
                }
                rows += n.shape[0];
                v.extend_from_slice(&n.value);
            }
            let mut shape = vec![rows];
            shape.extend_from_slice(tail);
            (shape, v)
        };
        Ok(self.push(shape, value, Op::ConcatRows(parts.to_vec())))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let (rows, cols) = shape_of_last(&na.shape);
            if na.shape.is_empty() || start > end || end > cols {
                return Err(Error::ShapeMismatch {
                    op: "slice",
                    lhs: na.shape.clone(),
                    rhs: vec![start, end],
                });
            }
            let mut v = Vec::with_capacity(rows * (end - start));
            for r in 0..rows {
                v.extend_from_slice(&na.value[r * cols + start..r * cols + end]);
            }
            let mut shape = na.shape.clone();
            *shape.last_mut().unwrap() = end - start;
            (shape, v)
        };
        Ok(self.push(shape, value, Op::Slice(a, start, end)))
    }

    /// Rows `start..end` of the first axis.
    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            if na.shape.is_empty() || start > end || end > na.shape[0] {
                return Err(Error::ShapeMismatch {
                    op: "slice_rows",
                    lhs: na.shape.clone(),
                    rhs: vec![start, end],
                });
            }
            let stride = numel(&na.shape[1..]);
            let mut shape = na.shape.clone();
            shape[0] = end - start;
            (shape, na.value[start * stride..end * stride].to_vec())
        };
        Ok(self.push(shape, value, Op::SliceRows(a, start)))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            if numel(shape) != na.value.len() {
                return Err(Error::ShapeMismatch {
                    op: "reshape",
                    lhs: na.shape.clone(),
                    rhs: shape.to_vec(),
                });
            }
            na.value.clone()
        };
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a)))
    }

    /// Repeats `a` along new or existing leading axes to `shape`.
    pub fn broadcast(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let ok = na.value.len() == 1 || is_suffix(&na.shape, shape);
            if !ok || na.value.is_empty() {
                return Err(Error::ShapeMismatch {
                    op: "broadcast",
                    lhs: na.shape.clone(),
                    rhs: shape.to_vec(),
                });
            }
            let total = numel(shape);
            let mut v = Vec::with_capacity(total);
            while v.len() < total {
                v.extend_from_slice(&na.value);
            }
            v
        };
        Ok(self.push(shape.to_vec(), value, Op::Broadcast(a)))
    }

    /// Same value as `a`, contributes no gradient.
    pub fn stop_gradient(&self, a: Var) -> Var {
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].shape.clone(), nodes[a.0].value.clone())
        };
        self.push(shape, value, Op::StopGrad)
    }

    /// Forward value `value`, backward identity into `surrogate`.
    pub fn straight_through(&self, value: Tensor<S>, surrogate: Var) -> Result<Var> {
        let sshape = self.shape(surrogate);
        if sshape != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "straight_through",
                lhs: value.shape().to_vec(),
                rhs: sshape,
            });
        }
        Ok(self.push(sshape, value.into_data(), Op::StraightThrough(surrogate)))
    }

    /// Elementwise `(a - b)²`; shapes must match exactly.
    pub fn squared_error(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "squared_error",
                lhs: sa,
                rhs: sb,
            });
        }
        self.binary(
            "squared_error",
            a,
            b,
            |x, y| (x - y) * (x - y),
            Op::SquaredError(a, b),
        )
    }

    // ------------------------------------------------------------ backward

    /// Reverse pass from a scalar `loss`. Consumes the graph.
    pub fn backward(self, loss: Var) -> Result<GradientMap<S>> {
        let nodes = self.nodes.into_inner();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(nodes[loss.0].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![S::ONE]);
        let mut out: Vec<Option<Tensor<S>>> = Vec::new();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let mut acc = |v: Var, contrib: Vec<S>| match &mut grads[v.0] {
                Some(existing) => add_into(existing, &contrib),
                slot @ None => *slot = Some(contrib),
            };
            let val = |v: Var| nodes[v.0].value.as_slice();
            let y = node.value.as_slice();
            match &node.op {
                Op::Leaf | Op::StopGrad => {}
                Op::Param(pid) => {
                    if out.len() <= *pid {
                        out.resize(*pid + 1, None);
                    }
                    match &mut out[*pid] {
                        Some(t) => add_into(t.data_mut(), &g),
                        slot @ None => {
                            *slot = Some(Tensor::new(&node.shape, g).expect("param shape"))
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let mut ga = vec![S::ZERO; m * k];
                    S::gemm(m, n, k, &g, false, val(*b), true, &mut ga, false);
                    let mut gb = vec![S::ZERO; k * n];
                    S::gemm(k, m, n, val(*a), true, &g, false, &mut gb, false);
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::Transpose(a) => {
                    let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                    let mut ga = vec![S::ZERO; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] = g[j * r + i];
                        }
                    }
                    acc(*a, ga);
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let (la, lb) = (val(*a).len(), val(*b).len());
                    let gb = reduce_to(&g, lb);
                    let gb = if matches!(node.op, Op::Sub(..)) {
                        gb.into_iter().map(|x| -x).collect()
                    } else {
                        gb
                    };
                    acc(*a, reduce_to(&g, la));
                    acc(*b, gb);
                }
                Op::Mul(a, b) | Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let (la, lb) = (va.len(), vb.len());
                    let is_div = matches!(node.op, Op::Div(..));
                    let mut ga_full = Vec::with_capacity(g.len());
                    let mut gb_full = Vec::with_capacity(g.len());
                    for (i, &gi) in g.iter().enumerate() {
                        let (x, z) = (va[i % la], vb[i % lb]);
                        if is_div {
                            ga_full.push(gi / z);
                            gb_full.push(-gi * x / (z * z));
                        } else {
                            ga_full.push(gi * z);
                            gb_full.push(gi * x);
                        }
                    }
                    acc(*a, reduce_to(&ga_full, la));
                    acc(*b, reduce_to(&gb_full, lb));
                }
                Op::Neg(a) => acc(*a, g.iter().map(|&x| -x).collect()),
                Op::Scale(a, s) => acc(*a, g.iter().map(|&x| x * *s).collect()),
                Op::AddScalar(a) | Op::Reshape(a) => acc(*a, g),
                Op::Exp(a) => acc(*a, g.iter().zip(y).map(|(&gi, &yi)| gi * yi).collect()),
                Op::Ln(a) => acc(
                    *a,
                    g.iter().zip(val(*a)).map(|(&gi, &x)| gi / x).collect(),
                ),
                Op::Tanh(a) => acc(
                    *a,
                    g.iter()
                        .zip(y)
                        .map(|(&gi, &yi)| gi * (S::ONE - yi * yi))
                        .collect(),
                ),
                Op::Sigmoid(a) => acc(
                    *a,
                    g.iter()
                        .zip(y)
                        .map(|(&gi, &yi)| gi * yi * (S::ONE - yi))
                        .collect(),
                ),
                Op::Elu(a) => acc(
                    *a,
                    g.iter()
                        .zip(val(*a))
                        .zip(y)
                        .map(|((&gi, &x), &yi)| if x > S::ZERO { gi } else { gi * (yi + S::ONE) })
                        .collect(),
                ),
                Op::Softplus(a) => acc(
                    *a,
                    g.iter()
                        .zip(val(*a))
                        .map(|(&gi, &x)| gi * sigmoid(x))
                        .collect(),
                ),
                Op::Sqrt(a) => acc(
                    *a,
                    g.iter()
                        .zip(y)
                        .map(|(&gi, &yi)| gi / (yi + yi))
                        .collect(),
                ),
                Op::Square(a) => acc(
                    *a,
                    g.iter()
                        .zip(val(*a))
                        .map(|(&gi, &x)| gi * (x + x))
                        .collect(),
                ),
                Op::ClampMin(a, floor) => acc(
                    *a,
                    g.iter()
                        .zip(val(*a))
                        .map(|(&gi, &x)| if x > *floor { gi } else { S::ZERO })
                        .collect(),
                ),
                Op::Softmax(a) => {
                    let (_, cols) = shape_of_last(&node.shape);
                    let mut ga = Vec::with_capacity(g.len());
                    for (gr, yr) in g.chunks(cols).zip(y.chunks(cols)) {
                        let dot: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        ga.extend(gr.iter().zip(yr).map(|(&gi, &yi)| yi * (gi - dot)));
                    }
                    acc(*a, ga);
                }
                Op::LogSoftmax(a) => {
                    let (_, cols) = shape_of_last(&node.shape);
                    let mut ga = Vec::with_capacity(g.len());
                    for (gr, yr) in g.chunks(cols).zip(y.chunks(cols)) {
                        let gs: S = gr.iter().copied().sum();
                        ga.extend(gr.iter().zip(yr).map(|(&gi, &yi)| gi - yi.exp() * gs));
                    }
                    acc(*a, ga);
                }
                Op::SumAll(a) => acc(*a, vec![g[0]; val(*a).len()]),
                Op::MeanAll(a) => {
                    let n = val(*a).len();
                    acc(*a, vec![g[0] / S::from_usize(n); n]);
                }
                Op::SumLast(a) => {
                    let (_, cols) = shape_of_last(&nodes[a.0].shape);
                    let mut ga = Vec::with_capacity(val(*a).len());
                    for &gi in &g {
                        ga.extend(core::iter::repeat_n(gi, cols));
                    }
                    acc(*a, ga);
                }
                Op::Concat(parts) => {
                    let (rows, total) = shape_of_last(&node.shape);
                    let mut offset = 0;
                    for p in parts {
                        let ps = &nodes[p.0].shape;
                        let c = ps[ps.len() - 1];
                        let mut gp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        offset += c;
                        acc(*p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = nodes[p.0].value.len();
                        acc(*p, g[offset..offset + n].to_vec());
                        offset += n;
                    }
                }
                Op::Slice(a, start, end) => {
                    let (rows, cols) = shape_of_last(&nodes[a.0].shape);
                    let w = end - start;
                    let mut ga = vec![S::ZERO; rows * cols];
                    for r in 0..rows {
                        ga[r * cols + start..r * cols + end].copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    acc(*a, ga);
                }
                Op::SliceRows(a, start) => {
                    let sa = &nodes[a.0].shape;
                    let stride = numel(&sa[1..]);
                    let mut ga = vec![S::ZERO; nodes[a.0].value.len()];
                    ga[start * stride..start * stride + g.len()].copy_from_slice(&g);
                    acc(*a, ga);
                }
                Op::Broadcast(a) => {
                    let n = val(*a).len();
                    acc(*a, reduce_to(&g, n));
                }
                Op::StraightThrough(s) => acc(*s, g),
                Op::SquaredError(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let ga: Vec<S> = g
                        .iter()
                        .zip(va.iter().zip(vb))
                        .map(|(&gi, (&x, &z))| gi * (x - z) * S::from_f64(2.0))
                        .collect();
                    acc(*b, ga.iter().map(|&x| -x).collect());
                    acc(*a, ga);
                }
            }
        }

        for (pid, t) in out.iter().enumerate() {
            if let Some(t) = t {
                if !t.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of parameter {pid}")));
                }
            }
        }
        // parameters the loss never reached get explicit zeros
        for node in &nodes {
            if let Op::Param(pid) = node.op {
                if out.len() <= pid {
                    out.resize(pid + 1, None);
                }
                if out[pid].is_none() {
                    out[pid] = Some(Tensor::zeros(&node.shape));
                }
            }
        }
        Ok(GradientMap { grads: out })
    }
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::ZERO {
        S::ONE / (S::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::ONE + e)
    }
}

pub(crate) fn softplus<S: Scalar>(x: S) -> S {
    // log(1 + e^x) = max(x, 0) + log(1 + e^-|x|)
    x.max(S::ZERO) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, d).unwrap()
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let g = Graph::<f64>::new();
        let x = g.zeros(&[3, 2]);
        let y = g.tanh(x);
        assert!(g.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_of_constant_is_uniform() {
        let g = Graph::<f64>::new();
        let x = g.constant(&t(&[4], &[3.0; 4]));
        let y = g.softmax(x);
        assert_eq!(&*g.data(y), &[0.25; 4]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let g = Graph::<f64>::new();
        let x = g.param(0, &t(&[3], &[1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(0).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let g = Graph::<f64>::new();
        let x = g.param(0, &t(&[3], &[1.0, -2.0, 0.5]));
        let y = g.param(1, &t(&[3], &[4.0, 5.0, 6.0]));
        let sx = g.stop_gradient(x);
        assert_eq!(&*g.data(sx), &*g.data(x));
        let prod = g.mul(sx, y).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(0).unwrap().data(), &[0.0; 3]);
        assert_eq!(grads.get(1).unwrap().data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let g = Graph::<f64>::new();
        let a = g.zeros(&[2, 3]);
        let b = g.zeros(&[4, 2]);
        let err = g.matmul(a, b).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
        let c = g.zeros(&[2]);
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let g = Graph::<f64>::new();
        let x = g.param(0, &t(&[2], &[1.0, 2.0]));
        let y = g.tanh(x);
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn leading_axis_broadcast_reduces_gradient() {
        let g = Graph::<f64>::new();
        let x = g.param(0, &t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.param(1, &t(&[3], &[0.5, 0.5, 0.5]));
        let y = g.mul(x, b).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(1).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(grads.get(0).unwrap().data(), &[0.5; 6]);
    }

    #[test]
    fn straight_through_forwards_value_backwards_identity() {
        let g = Graph::<f64>::new();
        let p = g.param(0, &t(&[2], &[0.3, 0.7]));
        let s = g.straight_through(t(&[2], &[0.0, 1.0]), p).unwrap();
        assert_eq!(&*g.data(s), &[0.0, 1.0]);
        let w = g.constant(&t(&[2], &[2.0, 3.0]));
        let loss = g.sum(g.mul(s, w).unwrap());
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(0).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn unreached_param_gets_zero_entry() {
        let g = Graph::<f64>::new();
        let a = g.param(0, &t(&[2], &[1.0, 1.0]));
        let _b = g.param(1, &t(&[1, 2], &[1.0, 1.0]));
        let loss = g.sum(a);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(1).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(grads.len(), 2);
    }

    #[test]
    fn inputs_are_not_mutated() {
        let g = Graph::<f64>::new();
        let x = g.constant(&t(&[2, 2], &[1.0, -1.0, 0.5, 2.0]));
        let before = g.value(x);
        let _ = g.softmax(x);
        let _ = g.elu(x);
        let _ = g.transpose(x).unwrap();
        assert_eq!(g.value(x), before);
    }
}
