//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive applied during one forward pass. The
//! handles it returns ([`Var`]) are cheap `Copy` indices tied to the tape's
//! lifetime. Calling [`Tape::backward`] on a scalar node walks the record in
//! reverse and returns [`Gradients`] for every node that can reach a
//! trainable leaf.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type NodeId = usize;
pub type ParamId = usize;

/// How the right operand of an elementwise binary op is broadcast.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// Right operand has `last_dim` elements and repeats across rows.
    LastDim,
    /// Right operand has a single element.
    Scalar,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId, Bcast),
    Sub(NodeId, NodeId, Bcast),
    Mul(NodeId, NodeId, Bcast),
    Div(NodeId, NodeId, Bcast),
    Neg(NodeId),
    Scale(NodeId, S),
    AddScalar(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    LogSumExp(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumLast(NodeId),
    Concat(Vec<NodeId>),
    Stack(Vec<NodeId>),
    SliceLast { src: NodeId, start: usize },
    SliceRows { src: NodeId, start: usize },
    Transpose(NodeId),
    Reshape(NodeId),
    L2Normalize(NodeId),
    Dot(NodeId, NodeId),
    MaxLast { src: NodeId, index: Vec<usize> },
    Take { src: NodeId, index: Vec<usize> },
    GatherRows { src: NodeId, ids: Vec<usize> },
}

struct Node<S> {
    op: Op<S>,
    value: Arc<Tensor<S>>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Append-only record of one forward computation.
pub struct Tape<S> {
    nodes: RefCell<Vec<Node<S>>>,
}

/// Handle to a node on a [`Tape`].
pub struct Var<'t, S> {
    tape: &'t Tape<S>,
    id: NodeId,
}

impl<S> Clone for Var<'_, S> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<S> Copy for Var<'_, S> {}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
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

    /// A leaf that never receives gradients.
    pub fn constant(&self, t: Tensor<S>) -> Var<'_, S> {
        self.leaf(Arc::new(t), false, None)
    }

    /// A leaf that is differentiated but not tied to a stored parameter.
    pub fn variable(&self, t: Tensor<S>) -> Var<'_, S> {
        self.leaf(Arc::new(t), true, None)
    }

    pub fn param(&self, store: &ParamStore<S>, id: ParamId) -> Var<'_, S> {
        let p = &store.params[id];
        self.leaf(Arc::clone(&p.tensor), p.trainable, Some(id))
    }

    fn leaf(&self, value: Arc<Tensor<S>>, needs_grad: bool, param: Option<ParamId>) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad,
            param,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Handle to an already recorded node.
    pub fn node(&self, id: NodeId) -> Var<'_, S> {
        assert!(id < self.len(), "node {id} not on tape");
        Var { tape: self, id }
    }

    fn value(&self, id: NodeId) -> Arc<Tensor<S>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn push(&self, op: Op<S>, value: Tensor<S>, inputs: &[NodeId]) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = inputs.iter().any(|&i| nodes[i].needs_grad);
        nodes.push(Node {
            op,
            value: Arc::new(value),
            needs_grad,
            param: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_, S>) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, shape {:?}", nodes[root.id].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; nodes.len()];
        if nodes[root.id].needs_grad {
            grads[root.id] = Some(vec![S::one()]);
        }
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            params,
            shapes,
        })
    }
}

fn bcast_kind(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<Bcast> {
    if a.shape() == b.shape() {
        Ok(Bcast::Same)
    } else if b.numel() == 1 {
        Ok(Bcast::Scalar)
    } else if a.ndim() >= 1 && b.numel() == a.last_dim() && b.shape().iter().rev().skip(1).all(|&d| d == 1) {
        Ok(Bcast::LastDim)
    } else {
        Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

#[inline]
fn bidx(kind: Bcast, i: usize, last: usize) -> usize {
    match kind {
        Bcast::Same => i,
        Bcast::LastDim => i % last,
        Bcast::Scalar => 0,
    }
}

fn zip_bcast<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, kind: Bcast, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let last = a.last_dim().max(1);
    let bd = b.data();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, bd[bidx(kind, i, last)]))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn drop_last(shape: &[usize]) -> Vec<usize> {
    shape[..shape.len().saturating_sub(1)].to_vec()
}

fn with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = drop_last(shape);
    s.push(last);
    s
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn id(self) -> NodeId {
        self.id
    }

    pub fn tape(self) -> &'t Tape<S> {
        self.tape
    }

    pub fn value(self) -> Arc<Tensor<S>> {
        self.tape.value(self.id)
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(self) -> Result<S> {
        self.value().item()
    }

    pub fn requires_grad(self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    fn unary(self, op: Op<S>, f: impl Fn(S) -> S) -> Var<'t, S> {
        let v = self.value().map(f);
        self.tape.push(op, v, &[self.id])
    }

    fn binary(
        self,
        other: Var<'t, S>,
        name: &'static str,
        mk: impl Fn(NodeId, NodeId, Bcast) -> Op<S>,
        f: impl Fn(S, S) -> S,
    ) -> Result<Var<'t, S>> {
        let (a, b) = (self.value(), other.value());
        let kind = bcast_kind(name, &a, &b)?;
        let v = zip_bcast(&a, &b, kind, f);
        Ok(self.tape.push(mk(self.id, other.id, kind), v, &[self.id, other.id]))
    }

    /// `(n x k) . (k x m)`.
    pub fn matmul(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows() {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
        }
        let (n, k, m) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![S::zero(); n * m];
        let (ad, bd) = (a.data(), b.data());
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let x = ad[i * k + p];
                if x == S::zero() {
                    continue;
                }
                for (o, &y) in orow.iter_mut().zip(&bd[p * m..(p + 1) * m]) {
                    *o += x * y;
                }
            }
        }
        let v = Tensor::new(vec![n, m], out)?;
        Ok(self.tape.push(Op::MatMul(self.id, other.id), v, &[self.id, other.id]))
    }

    /// Elementwise sum; `other` may broadcast over the last dimension or be a scalar.
    pub fn add(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, "sub", Op::Sub, |x, y| x - y)
    }

    pub fn mul(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, "mul", Op::Mul, |x, y| x * y)
    }

    pub fn div(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let b = other.value();
        if b.data().iter().any(|&v| v == S::zero()) {
            return Err(Error::domain("div", "division by zero"));
        }
        self.binary(other, "div", Op::Div, |x, y| x / y)
    }

    pub fn neg(self) -> Var<'t, S> {
        self.unary(Op::Neg(self.id), |x| -x)
    }

    pub fn scale(self, c: S) -> Var<'t, S> {
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn add_scalar(self, c: S) -> Var<'t, S> {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    pub fn tanh(self) -> Var<'t, S> {
        self.unary(Op::Tanh(self.id), S::tanh)
    }

    pub fn sigmoid(self) -> Var<'t, S> {
        self.unary(Op::Sigmoid(self.id), S::sigmoid)
    }

    pub fn exp(self) -> Var<'t, S> {
        self.unary(Op::Exp(self.id), S::exp)
    }

    pub fn log(self) -> Result<Var<'t, S>> {
        let v = self.value();
        if let Some(x) = v.data().iter().find(|&&x| !(x > S::zero())) {
            return Err(Error::domain("log", format!("non-positive argument {x}")));
        }
        Ok(self.unary(Op::Log(self.id), S::ln))
    }

    pub fn square(self) -> Var<'t, S> {
        self.unary(Op::Square(self.id), |x| x * x)
    }

    pub fn relu(self) -> Var<'t, S> {
        self.unary(Op::Relu(self.id), |x| x.max(S::zero()))
    }

    /// Softmax over the last dimension, max-shifted.
    pub fn softmax(self) -> Var<'t, S> {
        let a = self.value();
        let c = a.last_dim();
        let mut out = Vec::with_capacity(a.numel());
        for r in 0..a.outer() {
            let row = a.row(r);
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let e: Vec<S> = row.iter().map(|&x| (x - max).exp()).collect();
            let z: S = e.iter().copied().sum();
            out.extend(e.into_iter().map(|x| x / z));
        }
        debug_assert_eq!(out.len(), a.outer() * c);
        let v = Tensor::new(a.shape().to_vec(), out).expect("shape kept");
        self.tape.push(Op::Softmax(self.id), v, &[self.id])
    }

    /// `log(sum(exp(x)))` over the last dimension; drops that dimension.
    pub fn log_sum_exp(self) -> Var<'t, S> {
        let a = self.value();
        let out: Vec<S> = (0..a.outer()).map(|r| crate::scalar::log_sum_exp(a.row(r))).collect();
        let v = Tensor::new(drop_last(a.shape()), out).expect("outer rows");
        self.tape.push(Op::LogSumExp(self.id), v, &[self.id])
    }

    pub fn sum(self) -> Var<'t, S> {
        let s: S = self.value().data().iter().copied().sum();
        self.tape.push(Op::Sum(self.id), Tensor::scalar(s), &[self.id])
    }

    pub fn mean(self) -> Var<'t, S> {
        let a = self.value();
        let n = S::of(a.numel() as f64);
        let s: S = a.data().iter().copied().sum();
        self.tape.push(Op::Mean(self.id), Tensor::scalar(s / n), &[self.id])
    }

    /// Sum over the last dimension.
    pub fn sum_last(self) -> Var<'t, S> {
        let a = self.value();
        let out = (0..a.outer()).map(|r| a.row(r).iter().copied().sum()).collect();
        let v = Tensor::new(drop_last(a.shape()), out).expect("outer rows");
        self.tape.push(Op::SumLast(self.id), v, &[self.id])
    }

    /// Concatenate along the last dimension. All inputs share the leading shape.
    pub fn concat(parts: &[Var<'t, S>]) -> Result<Var<'t, S>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let tape = first.tape;
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let lead = drop_last(vals[0].shape());
        if vals.iter().any(|v| v.ndim() == 0 || drop_last(v.shape()) != lead) {
            return Err(Error::shape("concat", "leading dimensions differ"));
        }
        let total: usize = vals.iter().map(|v| v.last_dim()).sum();
        let rows = vals[0].outer();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &vals {
                out.extend_from_slice(v.row(r));
            }
        }
        let v = Tensor::new(with_last(vals[0].shape(), total), out)?;
        let ids: Vec<_> = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(Op::Concat(ids.clone()), v, &ids))
    }

    /// Stack vectors `[d]` or matrices `[r, d]` row-wise into `[sum r, d]`.
    pub fn stack(parts: &[Var<'t, S>]) -> Result<Var<'t, S>> {
        let first = parts.first().ok_or_else(|| Error::shape("stack", "no inputs"))?;
        let tape = first.tape;
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let d = vals[0].last_dim();
        let mut rows = 0;
        for v in &vals {
            if v.ndim() == 0 || v.ndim() > 2 || v.last_dim() != d {
                return Err(Error::shape("stack", format!("incompatible part {:?}", v.shape())));
            }
            rows += v.outer();
        }
        let data = vals.iter().flat_map(|v| v.data().iter().copied()).collect();
        let v = Tensor::new(vec![rows, d], data)?;
        let ids: Vec<_> = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(Op::Stack(ids.clone()), v, &ids))
    }

    /// Columns `start..end` of the last dimension.
    pub fn slice_last(self, start: usize, end: usize) -> Result<Var<'t, S>> {
        let a = self.value();
        if a.ndim() == 0 || start > end || end > a.last_dim() {
            return Err(Error::shape("slice_last", format!("{start}..{end} of {:?}", a.shape())));
        }
        let mut out = Vec::with_capacity(a.outer() * (end - start));
        for r in 0..a.outer() {
            out.extend_from_slice(&a.row(r)[start..end]);
        }
        let v = Tensor::new(with_last(a.shape(), end - start), out)?;
        Ok(self.tape.push(Op::SliceLast { src: self.id, start }, v, &[self.id]))
    }

    /// Rows `start..end` along the first dimension.
    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t, S>> {
        let a = self.value();
        if a.ndim() == 0 || start > end || end > a.shape()[0] {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {:?}", a.shape())));
        }
        let inner: usize = a.shape()[1..].iter().product();
        let data = a.data()[start * inner..end * inner].to_vec();
        let mut shape = a.shape().to_vec();
        shape[0] = end - start;
        let v = Tensor::new(shape, data)?;
        Ok(self.tape.push(Op::SliceRows { src: self.id, start }, v, &[self.id]))
    }

    pub fn row(self, r: usize) -> Result<Var<'t, S>> {
        self.slice_rows(r, r + 1)
    }

    pub fn transpose(self) -> Result<Var<'t, S>> {
        let a = self.value();
        if a.ndim() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", a.shape())));
        }
        let (n, m) = (a.rows(), a.cols());
        let mut out = vec![S::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = a.data()[i * m + j];
            }
        }
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.tape.push(Op::Transpose(self.id), v, &[self.id]))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, S>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape.push(Op::Reshape(self.id), v, &[self.id]))
    }

    /// Scale each row (last dimension) to unit euclidean norm. A zero row is an error.
    pub fn l2_normalize(self) -> Result<Var<'t, S>> {
        let a = self.value();
        let mut out = Vec::with_capacity(a.numel());
        for r in 0..a.outer() {
            let row = a.row(r);
            let norm = row.iter().map(|&x| x * x).sum::<S>().sqrt();
            if norm == S::zero() {
                return Err(Error::domain("l2_normalize", format!("zero vector at row {r}")));
            }
            out.extend(row.iter().map(|&x| x / norm));
        }
        let v = Tensor::new(a.shape().to_vec(), out)?;
        Ok(self.tape.push(Op::L2Normalize(self.id), v, &[self.id]))
    }

    /// Inner product of two tensors with equal element counts.
    pub fn dot(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let (a, b) = (self.value(), other.value());
        if a.numel() != b.numel() {
            return Err(Error::shape("dot", format!("{:?} . {:?}", a.shape(), b.shape())));
        }
        let s: S = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).sum();
        Ok(self.tape.push(Op::Dot(self.id, other.id), Tensor::scalar(s), &[self.id, other.id]))
    }

    /// Maximum over the last dimension, with the winning positions (ties to the lowest index).
    pub fn max_last(self) -> (Var<'t, S>, Vec<usize>) {
        let a = self.value();
        let index: Vec<usize> = (0..a.outer()).map(|r| crate::scalar::argmax(a.row(r))).collect();
        let out = index.iter().enumerate().map(|(r, &c)| a.row(r)[c]).collect();
        let v = Tensor::new(drop_last(a.shape()), out).expect("outer rows");
        let var = self.tape.push(
            Op::MaxLast {
                src: self.id,
                index: index.clone(),
            },
            v,
            &[self.id],
        );
        (var, index)
    }

    /// Pick elements by flat index into a new tensor of the given shape.
    pub fn take(self, index: &[usize], shape: &[usize]) -> Result<Var<'t, S>> {
        let a = self.value();
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::shape("take", "index count does not match output shape"));
        }
        if let Some(&i) = index.iter().find(|&&i| i >= a.numel()) {
            return Err(Error::shape("take", format!("index {i} out of {}", a.numel())));
        }
        let out = index.iter().map(|&i| a.data()[i]).collect();
        let v = Tensor::new(shape.to_vec(), out)?;
        Ok(self.tape.push(
            Op::Take {
                src: self.id,
                index: index.to_vec(),
            },
            v,
            &[self.id],
        ))
    }

    /// Row gather from a `[rows, d]` table.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'t, S>> {
        let a = self.value();
        if a.ndim() != 2 {
            return Err(Error::shape("gather_rows", format!("table shape {:?}", a.shape())));
        }
        if let Some(&i) = ids.iter().find(|&&i| i >= a.rows()) {
            return Err(Error::shape("gather_rows", format!("row {i} out of {}", a.rows())));
        }
        let mut out = Vec::with_capacity(ids.len() * a.cols());
        for &i in ids {
            out.extend_from_slice(a.row(i));
        }
        let v = Tensor::new(vec![ids.len(), a.cols()], out)?;
        Ok(self.tape.push(
            Op::GatherRows {
                src: self.id,
                ids: ids.to_vec(),
            },
            v,
            &[self.id],
        ))
    }
}

fn accumulate<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
    id: NodeId,
    f: impl FnOnce(&mut [S]),
) {
    if !nodes[id].needs_grad {
        return;
    }
    let n = nodes[id].value.numel();
    let buf = grads[id].get_or_insert_with(|| vec![S::zero(); n]);
    f(buf);
}

/// Reduce an output-shaped gradient onto a broadcast right operand.
fn reduce_bcast<S: Scalar>(buf: &mut [S], g: impl Iterator<Item = S>, kind: Bcast) {
    let last = buf.len();
    for (i, gi) in g.enumerate() {
        let j = match kind {
            Bcast::Same => i,
            Bcast::LastDim => i % last,
            Bcast::Scalar => 0,
        };
        buf[j] += gi;
    }
}

fn backprop_node<S: Scalar>(nodes: &[Node<S>], id: NodeId, g: &[S], grads: &mut [Option<Vec<S>>]) {
    let node = &nodes[id];
    let y = node.value.data();
    let val = |i: NodeId| nodes[i].value.as_ref();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (n, k, m) = (av.rows(), av.cols(), bv.cols());
            accumulate(nodes, grads, *a, |da| {
                for i in 0..n {
                    let grow = &g[i * m..(i + 1) * m];
                    for p in 0..k {
                        let brow = &bv.data()[p * m..(p + 1) * m];
                        da[i * k + p] += grow.iter().zip(brow).map(|(&x, &y)| x * y).sum::<S>();
                    }
                }
            });
            accumulate(nodes, grads, *b, |db| {
                for i in 0..n {
                    let grow = &g[i * m..(i + 1) * m];
                    for p in 0..k {
                        let x = av.data()[i * k + p];
                        if x == S::zero() {
                            continue;
                        }
                        for (d, &gj) in db[p * m..(p + 1) * m].iter_mut().zip(grow) {
                            *d += x * gj;
                        }
                    }
                }
            });
        }
        Op::Add(a, b, kind) => {
            accumulate(nodes, grads, *a, |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d += x));
            accumulate(nodes, grads, *b, |db| reduce_bcast(db, g.iter().copied(), *kind));
        }
        Op::Sub(a, b, kind) => {
            accumulate(nodes, grads, *a, |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d += x));
            accumulate(nodes, grads, *b, |db| reduce_bcast(db, g.iter().map(|&x| -x), *kind));
        }
        Op::Mul(a, b, kind) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let last = val(*a).last_dim().max(1);
            accumulate(nodes, grads, *a, |da| {
                for (i, d) in da.iter_mut().enumerate() {
                    *d += g[i] * bv[bidx(*kind, i, last)];
                }
            });
            accumulate(nodes, grads, *b, |db| {
                reduce_bcast(db, g.iter().zip(av).map(|(&gi, &x)| gi * x), *kind)
            });
        }
        Op::Div(a, b, kind) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let last = val(*a).last_dim().max(1);
            accumulate(nodes, grads, *a, |da| {
                for (i, d) in da.iter_mut().enumerate() {
                    *d += g[i] / bv[bidx(*kind, i, last)];
                }
            });
            accumulate(nodes, grads, *b, |db| {
                let it = g.iter().zip(av).enumerate().map(|(i, (&gi, &x))| {
                    let q = bv[bidx(*kind, i, last)];
                    -gi * x / (q * q)
                });
                reduce_bcast(db, it, *kind)
            });
        }
        Op::Neg(a) => accumulate(nodes, grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, &x)| *d -= x)),
        Op::Scale(a, c) => {
            accumulate(nodes, grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, &x)| *d += x * *c))
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            accumulate(nodes, grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, &x)| *d += x))
        }
        Op::Tanh(a) => accumulate(nodes, grads, *a, |d| {
            for ((d, &gi), &yi) in d.iter_mut().zip(g).zip(y) {
                *d += gi * (S::one() - yi * yi);
            }
        }),
        Op::Sigmoid(a) => accumulate(nodes, grads, *a, |d| {
            for ((d, &gi), &yi) in d.iter_mut().zip(g).zip(y) {
                *d += gi * yi * (S::one() - yi);
            }
        }),
        Op::Exp(a) => accumulate(nodes, grads, *a, |d| {
            for ((d, &gi), &yi) in d.iter_mut().zip(g).zip(y) {
                *d += gi * yi;
            }
        }),
        Op::Log(a) => {
            let x = val(*a).data();
            accumulate(nodes, grads, *a, |d| {
                for ((d, &gi), &xi) in d.iter_mut().zip(g).zip(x) {
                    *d += gi / xi;
                }
            })
        }
        Op::Square(a) => {
            let x = val(*a).data();
            accumulate(nodes, grads, *a, |d| {
                for ((d, &gi), &xi) in d.iter_mut().zip(g).zip(x) {
                    *d += S::of(2.0) * xi * gi;
                }
            })
        }
        Op::Relu(a) => {
            let x = val(*a).data();
            accumulate(nodes, grads, *a, |d| {
                for ((d, &gi), &xi) in d.iter_mut().zip(g).zip(x) {
                    if xi > S::zero() {
                        *d += gi;
                    }
                }
            })
        }
        Op::Softmax(a) => {
            let c = node.value.last_dim();
            accumulate(nodes, grads, *a, |d| {
                for r in 0..node.value.outer() {
                    let (gr, yr) = (&g[r * c..(r + 1) * c], &y[r * c..(r + 1) * c]);
                    let inner: S = gr.iter().zip(yr).map(|(&gi, &yi)| gi * yi).sum();
                    for j in 0..c {
                        d[r * c + j] += yr[j] * (gr[j] - inner);
                    }
                }
            })
        }
        Op::LogSumExp(a) => {
            let xv = val(*a);
            let c = xv.last_dim();
            accumulate(nodes, grads, *a, |d| {
                for r in 0..xv.outer() {
                    for j in 0..c {
                        d[r * c + j] += g[r] * (xv.data()[r * c + j] - y[r]).exp();
                    }
                }
            })
        }
        Op::Sum(a) => accumulate(nodes, grads, *a, |d| d.iter_mut().for_each(|d| *d += g[0])),
        Op::Mean(a) => {
            let n = S::of(val(*a).numel() as f64);
            accumulate(nodes, grads, *a, |d| d.iter_mut().for_each(|d| *d += g[0] / n))
        }
        Op::SumLast(a) => {
            let c = val(*a).last_dim();
            accumulate(nodes, grads, *a, |d| {
                for (i, d) in d.iter_mut().enumerate() {
                    *d += g[i / c];
                }
            })
        }
        Op::Concat(parts) => {
            let total = node.value.last_dim();
            let rows = node.value.outer();
            let mut offset = 0;
            for &p in parts {
                let w = val(p).last_dim();
                accumulate(nodes, grads, p, |d| {
                    for r in 0..rows {
                        for j in 0..w {
                            d[r * w + j] += g[r * total + offset + j];
                        }
                    }
                });
                offset += w;
            }
        }
        Op::Stack(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).numel();
                accumulate(nodes, grads, p, |d| {
                    d.iter_mut().zip(&g[offset..offset + n]).for_each(|(d, &x)| *d += x)
                });
                offset += n;
            }
        }
        Op::SliceLast { src, start } => {
            let (w, full) = (node.value.last_dim(), val(*src).last_dim());
            accumulate(nodes, grads, *src, |d| {
                for r in 0..node.value.outer() {
                    for j in 0..w {
                        d[r * full + start + j] += g[r * w + j];
                    }
                }
            })
        }
        Op::SliceRows { src, start } => {
            let inner: usize = val(*src).shape()[1..].iter().product();
            accumulate(nodes, grads, *src, |d| {
                d[start * inner..start * inner + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, &x)| *d += x)
            })
        }
        Op::Transpose(a) => {
            let (n, m) = (val(*a).rows(), val(*a).cols());
            accumulate(nodes, grads, *a, |d| {
                for i in 0..n {
                    for j in 0..m {
                        d[i * m + j] += g[j * n + i];
                    }
                }
            })
        }
        Op::L2Normalize(a) => {
            let xv = val(*a);
            let c = xv.last_dim();
            accumulate(nodes, grads, *a, |d| {
                for r in 0..xv.outer() {
                    let xr = xv.row(r);
                    let norm = xr.iter().map(|&x| x * x).sum::<S>().sqrt();
                    let (gr, yr) = (&g[r * c..(r + 1) * c], &y[r * c..(r + 1) * c]);
                    let inner: S = gr.iter().zip(yr).map(|(&gi, &yi)| gi * yi).sum();
                    for j in 0..c {
                        d[r * c + j] += (gr[j] - yr[j] * inner) / norm;
                    }
                }
            })
        }
        Op::Dot(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            accumulate(nodes, grads, *a, |d| d.iter_mut().zip(bv).for_each(|(d, &x)| *d += g[0] * x));
            accumulate(nodes, grads, *b, |d| d.iter_mut().zip(av).for_each(|(d, &x)| *d += g[0] * x));
        }
        Op::MaxLast { src, index } => {
            let c = val(*src).last_dim();
            accumulate(nodes, grads, *src, |d| {
                for (r, &j) in index.iter().enumerate() {
                    d[r * c + j] += g[r];
                }
            })
        }
        Op::Take { src, index } => accumulate(nodes, grads, *src, |d| {
            for (&i, &gi) in index.iter().zip(g) {
                d[i] += gi;
            }
        }),
        Op::GatherRows { src, ids } => {
            let c = val(*src).cols();
            accumulate(nodes, grads, *src, |d| {
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += g[r * c + j];
                    }
                }
            })
        }
    }
}

/// Result of a reverse sweep.
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    params: Vec<(ParamId, NodeId)>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to a node, or `None` if no gradient reached it.
    pub fn wrt(&self, v: Var<'_, S>) -> Option<Tensor<S>> {
        self.grads
            .get(v.id)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::new(self.shapes[v.id].clone(), g.clone()).expect("recorded shape"))
    }

    /// Gradient for a stored parameter, summed over every leaf bound to it.
    /// `None` when the parameter was never bound or no gradient reached it.
    pub fn param(&self, id: ParamId) -> Option<Tensor<S>> {
        let mut out: Option<Tensor<S>> = None;
        for &(p, node) in &self.params {
            if p != id {
                continue;
            }
            if let Some(g) = &self.grads[node] {
                let acc = out.get_or_insert_with(|| Tensor::zeros(&self.shapes[node]));
                acc.data_mut().iter_mut().zip(g).for_each(|(a, &x)| *a += x);
            }
        }
        out
    }

    /// One gradient per parameter in `store`; unreachable parameters get zeros.
    pub fn for_store(&self, store: &ParamStore<S>) -> Vec<Tensor<S>> {
        (0..store.len())
            .map(|id| self.param(id).unwrap_or_else(|| Tensor::zeros(store.get(id).shape())))
            .collect()
    }
}

#[derive(Debug)]
pub struct Parameter<S> {
    pub name: String,
    pub tensor: Arc<Tensor<S>>,
    pub trainable: bool,
}

impl<S: Clone> Clone for Parameter<S> {
    fn clone(&self) -> Self {
        Self {
            name: self.name.clone(),
            tensor: Arc::clone(&self.tensor),
            trainable: self.trainable,
        }
    }
}

/// Named parameters of a model, addressed by insertion index.
#[derive(Debug)]
pub struct ParamStore<S> {
    params: Vec<Parameter<S>>,
    index: HashMap<String, ParamId>,
}

impl<S: Clone> Clone for ParamStore<S> {
    fn clone(&self) -> Self {
        Self {
            params: self.params.clone(),
            index: self.index.clone(),
        }
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<S>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor: Arc::new(tensor),
            trainable,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        Arc::make_mut(&mut self.params[id].tensor)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id].name
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id].trainable
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    /// Registers every parameter as a leaf; the result is indexed by [`ParamId`].
    pub fn bind<'t>(&self, tape: &'t Tape<S>) -> Vec<Var<'t, S>> {
        (0..self.len()).map(|id| tape.param(self, id)).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_value() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = a.matmul(b).unwrap();
        assert_eq!(c.value().data(), &[11.0]);
        assert_eq!(c.shape(), vec![1, 1]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        assert_eq!(x.softmax().value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn l2_normalize_345() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let y = x.l2_normalize().unwrap().value();
        assert!((y.data()[0] - 0.6).abs() < 1e-15 && (y.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_rejects_zero_vector() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        assert!(matches!(x.l2_normalize(), Err(Error::Domain { .. })));
    }

    #[test]
    fn log_rejects_non_positive() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(x.log().is_err());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
        let b = tape.constant(Tensor::<f64>::zeros(&[2, 2]));
        assert!(matches!(a.matmul(b), Err(Error::Shape { .. })));
        assert!(matches!(a.add(b), Err(Error::Shape { .. })));
    }

    #[test]
    fn grad_of_sum_square() {
        let tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::vector(vec![3.0]));
        let root = x.square().sum();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn grad_of_log_softmax() {
        let tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::vector(vec![0.0, 0.0]));
        let p = x.softmax().log().unwrap();
        let root = p.take(&[0], &[]).unwrap();
        let g = tape.backward(root).unwrap().wrt(x).unwrap();
        assert!((g.data()[0] - 0.5).abs() < 1e-15);
        assert!((g.data()[1] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut store = ParamStore::new();
        let used = store.add("used", Tensor::vector(vec![2.0]), true).unwrap();
        let unused = store.add("unused", Tensor::vector(vec![5.0, 1.0]), true).unwrap();
        let tape = Tape::<f64>::new();
        let vars = store.bind(&tape);
        let root = vars[used].square().sum();
        let grads = tape.backward(root).unwrap();
        assert!(grads.param(unused).is_none());
        let dense = grads.for_store(&store);
        assert_eq!(dense[used].data(), &[4.0]);
        assert_eq!(dense[unused].data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(x.square()).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let root = x.dot(c).unwrap();
        let g = tape.backward(root).unwrap();
        assert!(g.wrt(c).is_none());
        assert_eq!(g.wrt(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn gather_scatters_into_gathered_rows_only() {
        let tape = Tape::<f64>::new();
        let table = tape.variable(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let rows = table.gather_rows(&[2, 2, 0]).unwrap();
        assert_eq!(rows.value().data(), &[5.0, 6.0, 5.0, 6.0, 1.0, 2.0]);
        let g = tape.backward(rows.sum()).unwrap().wrt(table).unwrap();
        assert_eq!(g.data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn duplicate_parameter_names_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::scalar(1.0), true).unwrap();
        assert!(store.add("w", Tensor::scalar(1.0), true).is_err());
    }
}
