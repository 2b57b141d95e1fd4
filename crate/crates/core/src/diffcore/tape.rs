use std::sync::Arc;

use crate::scalar::{gemm, Scalar};

use super::kernels::{self, ConvGeom};
use super::{DiffError, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var, S),
    MatMul(Var, Var),
    /// `[.., n] + [n]`
    AddBias(Var, Var),
    /// `[.., n] * [n]`: scales each slice along the last axis.
    ScaleLast(Var, Var),
    /// `[m, ..] * [m]`: scales each slice along the first axis.
    ScaleFirst(Var, Var),
    Conv2d(Var, Var),
    ConvTranspose2d(Var, Var),
    Sigmoid(Var),
    LeakyRelu(Var, S),
    Abs(Var),
    Pow(Var, S),
    Sum(Var),
    Min(Vec<Var>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
}

struct Node<S> {
    value: Arc<Tensor<S>>,
    op: Op<S>,
    needs_grad: bool,
}

/// Ordered record of primitive operations.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and the backward pass is a single reverse sweep.
/// Builder methods panic on shape misuse; numerical trouble (NaN/Inf) is
/// recorded and reported through [`Tape::check_finite`].
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    first_nonfinite: Option<usize>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            first_nonfinite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Handle of the `i`-th recorded node.
    pub fn var_at(&self, i: usize) -> Var {
        assert!(i < self.nodes.len(), "node {i} not recorded");
        Var(i)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Id of the first node whose value contained NaN or Inf.
    pub fn first_nonfinite(&self) -> Option<usize> {
        self.first_nonfinite
    }

    pub fn check_finite(&self) -> Result<(), DiffError> {
        match self.first_nonfinite {
            Some(node) => Err(DiffError::NonFinite { node }),
            None => Ok(()),
        }
    }

    /// Differentiable input.
    pub fn var(&mut self, value: Tensor<S>) -> Var {
        self.push_leaf(Arc::new(value), true)
    }

    /// Differentiable input sharing storage with the caller (parameters).
    pub fn var_shared(&mut self, value: Arc<Tensor<S>>) -> Var {
        self.push_leaf(value, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push_leaf(Arc::new(value), false)
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor<S>>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Arc<Tensor<S>>, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    fn push(&mut self, value: Arc<Tensor<S>>, op: Op<S>, needs_grad: bool) -> Var {
        let id = self.nodes.len();
        if self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some(id);
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(id)
    }

    fn record(&mut self, op: Op<S>) -> Var {
        let value = eval_op(&op, |v| &self.nodes[v.0].value);
        let needs_grad = op_inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Arc::new(value), op, needs_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("add", a, b);
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("sub", a, b);
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("mul", a, b);
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        self.record(Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        self.record(Op::AddScalar(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul shapes {sa:?} x {sb:?}"
        );
        self.record(Op::MatMul(a, b))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        assert!(
            sb.len() == 1 && sa.last() == Some(&sb[0]),
            "add_bias shapes {sa:?} + {sb:?}"
        );
        self.record(Op::AddBias(a, bias))
    }

    pub fn scale_last(&mut self, a: Var, v: Var) -> Var {
        let (sa, sv) = (self.shape(a), self.shape(v));
        assert!(
            sv.len() == 1 && sa.last() == Some(&sv[0]),
            "scale_last shapes {sa:?} * {sv:?}"
        );
        self.record(Op::ScaleLast(a, v))
    }

    pub fn scale_first(&mut self, a: Var, v: Var) -> Var {
        let (sa, sv) = (self.shape(a), self.shape(v));
        assert!(
            sv.len() == 1 && sa.first() == Some(&sv[0]),
            "scale_first shapes {sa:?} * {sv:?}"
        );
        self.record(Op::ScaleFirst(a, v))
    }

    /// Same-padded, stride-1 convolution on channels-last images.
    pub fn conv2d(&mut self, x: Var, kernel: Var) -> Var {
        let (sx, sw) = (self.shape(x), self.shape(kernel));
        assert!(ConvGeom::from_shapes(sx, sw).is_some(), "conv2d shapes {sx:?} * {sw:?}");
        self.record(Op::Conv2d(x, kernel))
    }

    /// Same-padded, stride-1 transposed convolution on channels-last images.
    pub fn conv_transpose2d(&mut self, x: Var, kernel: Var) -> Var {
        let (sx, sw) = (self.shape(x), self.shape(kernel));
        assert!(
            ConvGeom::from_shapes(sx, sw).is_some(),
            "conv_transpose2d shapes {sx:?} * {sw:?}"
        );
        self.record(Op::ConvTranspose2d(x, kernel))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.record(Op::Sigmoid(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: S) -> Var {
        self.record(Op::LeakyRelu(a, slope))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.record(Op::Abs(a))
    }

    /// Elementwise `a^exponent`; the base is expected to be positive.
    pub fn pow(&mut self, a: Var, exponent: S) -> Var {
        self.record(Op::Pow(a, exponent))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.record(Op::Sum(a))
    }

    /// Minimum over single-element nodes. The gradient flows only into the
    /// arg-min; ties resolve to the lowest position in `items`.
    pub fn min(&mut self, items: &[Var]) -> Var {
        assert!(!items.is_empty(), "min over empty set");
        for &v in items {
            assert_eq!(self.value(v).numel(), 1, "min expects scalar nodes");
        }
        self.record(Op::Min(items.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.value(a).numel(),
            "reshape {:?} -> {shape:?}",
            self.shape(a)
        );
        let value = self.value(a).clone().reshaped(shape);
        let needs_grad = self.nodes[a.0].needs_grad;
        self.push(Arc::new(value), Op::Reshape(a), needs_grad)
    }

    pub fn concat(&mut self, items: &[Var], axis: usize) -> Var {
        assert!(!items.is_empty(), "concat of nothing");
        let first = self.shape(items[0]).to_vec();
        for &v in items {
            let s = self.shape(v);
            assert!(
                s.len() == first.len()
                    && s.iter().enumerate().all(|(i, &d)| i == axis || d == first[i]),
                "concat shapes {first:?} vs {s:?} along {axis}"
            );
        }
        self.record(Op::Concat(items.to_vec(), axis))
    }

    /// Sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let s = self.shape(a);
        assert!(axis < s.len() && start + len <= s[axis], "narrow {s:?} axis {axis} {start}+{len}");
        let value = {
            let t = self.value(a);
            let mut shape = t.shape().to_vec();
            shape[axis] = len;
            Tensor::from_shape_vec(&shape, kernels::narrow(t.data(), t.shape(), axis, start, len))
        };
        let needs_grad = self.nodes[a.0].needs_grad;
        self.push(Arc::new(value), Op::Narrow(a, axis, start), needs_grad)
    }

    /// Splits `a` along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Vec<Var> {
        assert_eq!(sizes.iter().sum::<usize>(), self.shape(a)[axis], "split sizes");
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let v = self.narrow(a, axis, start, len);
                start += len;
                v
            })
            .collect()
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: shape mismatch");
    }

    /// Re-evaluates every recorded node from the stored leaves.
    pub fn replay(&self) -> Vec<Tensor<S>> {
        let mut values: Vec<Arc<Tensor<S>>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::Reshape(a) => {
                    Arc::new(values[a.0].as_ref().clone().reshaped(node.value.shape()))
                }
                Op::Narrow(a, axis, start) => {
                    let t = &values[a.0];
                    let len = node.value.shape()[*axis];
                    Arc::new(Tensor::from_shape_vec(
                        node.value.shape(),
                        kernels::narrow(t.data(), t.shape(), *axis, *start, len),
                    ))
                }
                op => Arc::new(eval_op(op, |v| &values[v.0])),
            };
            values.push(v);
        }
        values.into_iter().map(Arc::unwrap_or_clone).collect()
    }

    /// Reverse sweep from `output` seeded with `seed`.
    pub fn backward(&self, output: Var, seed: &Tensor<S>) -> Result<Gradients<S>, DiffError> {
        let out_shape = self.shape(output);
        if out_shape != seed.shape() {
            return Err(DiffError::ShapeMismatch {
                node: output.0,
                expected: out_shape.to_vec(),
                found: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.clone());
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if g.shape() != node.value.shape() {
                return Err(DiffError::ShapeMismatch {
                    node: id,
                    expected: node.value.shape().to_vec(),
                    found: g.shape().to_vec(),
                });
            }
            self.propagate(node, &g, &mut grads);
            // Keep the gradient of interior nodes queryable.
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn val(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn propagate(&self, node: &Node<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let acc = |grads: &mut [Option<Tensor<S>>], v: Var, t: Tensor<S>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot => *slot = Some(t),
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, zip_map(g, self.val(*b), |gv, bv| gv * bv));
                }
                if self.wants(*b) {
                    acc(grads, *b, zip_map(g, self.val(*a), |gv, av| gv * av));
                }
            }
            Op::Scale(a, c) => acc(grads, *a, g.map(|v| v * *c)),
            Op::AddScalar(a, _) => acc(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    let mut da = vec![S::zero(); m * k];
                    gemm(false, true, m, k, n, S::one(), g.data(), tb.data(), S::zero(), &mut da);
                    acc(grads, *a, Tensor::from_shape_vec(&[m, k], da));
                }
                if self.wants(*b) {
                    let mut db = vec![S::zero(); k * n];
                    gemm(true, false, k, n, m, S::one(), ta.data(), g.data(), S::zero(), &mut db);
                    acc(grads, *b, Tensor::from_shape_vec(&[k, n], db));
                }
            }
            Op::AddBias(a, bias) => {
                if self.wants(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.wants(*bias) {
                    let n = self.val(*bias).numel();
                    let mut db = vec![S::zero(); n];
                    for row in g.data().chunks_exact(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(grads, *bias, Tensor::vector(db));
                }
            }
            Op::ScaleLast(a, v) => {
                let (ta, tv) = (self.val(*a), self.val(*v));
                let n = tv.numel();
                if self.wants(*a) {
                    let mut da = g.clone();
                    for row in da.data_mut().chunks_exact_mut(n) {
                        for (d, &s) in row.iter_mut().zip(tv.data()) {
                            *d *= s;
                        }
                    }
                    acc(grads, *a, da);
                }
                if self.wants(*v) {
                    let mut dv = vec![S::zero(); n];
                    for (grow, arow) in g.data().chunks_exact(n).zip(ta.data().chunks_exact(n)) {
                        for ((d, &gv), &av) in dv.iter_mut().zip(grow).zip(arow) {
                            *d += gv * av;
                        }
                    }
                    acc(grads, *v, Tensor::vector(dv));
                }
            }
            Op::ScaleFirst(a, v) => {
                let (ta, tv) = (self.val(*a), self.val(*v));
                let inner = ta.numel() / tv.numel();
                if self.wants(*a) {
                    let mut da = g.clone();
                    for (row, &s) in da.data_mut().chunks_exact_mut(inner).zip(tv.data()) {
                        for d in row.iter_mut() {
                            *d *= s;
                        }
                    }
                    acc(grads, *a, da);
                }
                if self.wants(*v) {
                    let dv = g
                        .data()
                        .chunks_exact(inner)
                        .zip(ta.data().chunks_exact(inner))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(&x, &y)| x * y).sum())
                        .collect();
                    acc(grads, *v, Tensor::vector(dv));
                }
            }
            Op::Conv2d(x, w) | Op::ConvTranspose2d(x, w) => {
                let transposed = matches!(node.op, Op::ConvTranspose2d(..));
                let (tx, tw) = (self.val(*x), self.val(*w));
                let geom = ConvGeom::from_shapes(tx.shape(), tw.shape()).expect("checked at record");
                let (dx, dw) = kernels::conv_backward(
                    &geom,
                    tx.data(),
                    tw.data(),
                    g.data(),
                    transposed,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(dx) = dx {
                    acc(grads, *x, Tensor::from_shape_vec(tx.shape(), dx));
                }
                if let Some(dw) = dw {
                    acc(grads, *w, Tensor::from_shape_vec(tw.shape(), dw));
                }
            }
            Op::Sigmoid(a) => acc(grads, *a, zip_map(g, y, |gv, s| gv * s * (S::one() - s))),
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                acc(
                    grads,
                    *a,
                    zip_map(g, self.val(*a), |gv, x| if x > S::zero() { gv } else { gv * slope }),
                )
            }
            Op::Abs(a) => acc(grads, *a, zip_map(g, self.val(*a), |gv, x| gv * sign(x))),
            Op::Pow(a, p) => {
                let p = *p;
                acc(
                    grads,
                    *a,
                    zip_map(g, self.val(*a), |gv, x| gv * p * x.powf(p - S::one())),
                )
            }
            Op::Sum(a) => {
                let gv = g.item();
                acc(grads, *a, Tensor::full(self.val(*a).shape(), gv));
            }
            Op::Min(items) => {
                let pick = argmin(items.iter().map(|v| self.val(*v).item()));
                let target = items[pick];
                if self.wants(target) {
                    let t = self.val(target);
                    acc(grads, target, Tensor::full(t.shape(), g.item()));
                }
            }
            Op::Reshape(a) => acc(grads, *a, g.clone().reshaped(self.val(*a).shape())),
            Op::Concat(items, axis) => {
                let mut start = 0;
                for v in items {
                    let s = self.val(*v).shape();
                    let len = s[*axis];
                    if self.wants(*v) {
                        let part = kernels::narrow(g.data(), g.shape(), *axis, start, len);
                        acc(grads, *v, Tensor::from_shape_vec(s, part));
                    }
                    start += len;
                }
            }
            Op::Narrow(a, axis, start) => {
                let s = self.val(*a).shape();
                let len = g.shape()[*axis];
                let dx = kernels::narrow_backward(g.data(), s, *axis, *start, len);
                acc(grads, *a, Tensor::from_shape_vec(s, dx));
            }
        }
    }
}

fn sign<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        S::one()
    } else if x < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

/// Index of the smallest value; the lowest index wins ties.
pub(crate) fn argmin<S: Scalar>(mut values: impl Iterator<Item = S>) -> usize {
    let Some(mut best_val) = values.next() else { return 0 };
    let mut best = 0;
    for (i, v) in values.enumerate() {
        if v < best_val {
            best = i + 1;
            best_val = v;
        }
    }
    best
}

fn zip_map<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_shape_vec(a.shape(), data)
}

fn op_inputs<S>(op: &Op<S>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::MatMul(a, b)
        | Op::AddBias(a, b)
        | Op::ScaleLast(a, b)
        | Op::ScaleFirst(a, b)
        | Op::Conv2d(a, b)
        | Op::ConvTranspose2d(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::AddScalar(a, _)
        | Op::Sigmoid(a)
        | Op::LeakyRelu(a, _)
        | Op::Abs(a)
        | Op::Pow(a, _)
        | Op::Sum(a)
        | Op::Reshape(a)
        | Op::Narrow(a, _, _) => vec![*a],
        Op::Min(items) | Op::Concat(items, _) => items.clone(),
    }
}

/// Forward evaluation of one op given access to its input values.
///
/// `Reshape` and `Narrow` carry their output shape on the node, so they are
/// evaluated by the tape itself and never reach this function.
fn eval_op<'a, S: Scalar>(op: &Op<S>, get: impl Fn(Var) -> &'a Arc<Tensor<S>>) -> Tensor<S> {
    let unary = |a: &Var, f: &dyn Fn(S) -> S| get(*a).map(f);
    match op {
        Op::Leaf | Op::Reshape(_) | Op::Narrow(..) => unreachable!("evaluated by the tape"),
        Op::Add(a, b) => zip_map(get(*a), get(*b), |x, y| x + y),
        Op::Sub(a, b) => zip_map(get(*a), get(*b), |x, y| x - y),
        Op::Mul(a, b) => zip_map(get(*a), get(*b), |x, y| x * y),
        Op::Scale(a, c) => unary(a, &|x| x * *c),
        Op::AddScalar(a, c) => unary(a, &|x| x + *c),
        Op::MatMul(a, b) => {
            let (ta, tb) = (get(*a), get(*b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            let mut out = vec![S::zero(); m * n];
            gemm(false, false, m, n, k, S::one(), ta.data(), tb.data(), S::zero(), &mut out);
            Tensor::from_shape_vec(&[m, n], out)
        }
        Op::AddBias(a, b) => {
            let (ta, tb) = (get(*a), get(*b));
            let mut out = ta.as_ref().clone();
            for row in out.data_mut().chunks_exact_mut(tb.numel()) {
                for (o, &bv) in row.iter_mut().zip(tb.data()) {
                    *o += bv;
                }
            }
            out
        }
        Op::ScaleLast(a, v) => {
            let (ta, tv) = (get(*a), get(*v));
            let mut out = ta.as_ref().clone();
            for row in out.data_mut().chunks_exact_mut(tv.numel()) {
                for (o, &s) in row.iter_mut().zip(tv.data()) {
                    *o *= s;
                }
            }
            out
        }
        Op::ScaleFirst(a, v) => {
            let (ta, tv) = (get(*a), get(*v));
            let inner = ta.numel() / tv.numel();
            let mut out = ta.as_ref().clone();
            for (row, &s) in out.data_mut().chunks_exact_mut(inner).zip(tv.data()) {
                for o in row.iter_mut() {
                    *o *= s;
                }
            }
            out
        }
        Op::Conv2d(x, w) | Op::ConvTranspose2d(x, w) => {
            let (tx, tw) = (get(*x), get(*w));
            let geom = ConvGeom::from_shapes(tx.shape(), tw.shape()).expect("checked at record");
            let transposed = matches!(op, Op::ConvTranspose2d(..));
            let y = kernels::conv_forward(&geom, tx.data(), tw.data(), transposed);
            Tensor::from_shape_vec(&[geom.batch, geom.height, geom.width, geom.out_ch], y)
        }
        Op::Sigmoid(a) => unary(a, &sigmoid),
        Op::LeakyRelu(a, slope) => unary(a, &|x| if x > S::zero() { x } else { x * *slope }),
        Op::Abs(a) => unary(a, &|x| x.abs()),
        Op::Pow(a, p) => unary(a, &|x| x.powf(*p)),
        Op::Sum(a) => Tensor::scalar(get(*a).sum()),
        Op::Min(items) => {
            let vals: Vec<S> = items.iter().map(|v| get(*v).item()).collect();
            Tensor::scalar(vals[argmin(vals.iter().copied())])
        }
        Op::Concat(items, axis) => {
            let parts: Vec<(&[S], &[usize])> =
                items.iter().map(|v| (get(*v).data(), get(*v).shape())).collect();
            let (data, shape) = kernels::concat(&parts, *axis);
            Tensor::from_shape_vec(&shape, data)
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the output wrt `v`, if any flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient wrt `v`, materialised as zeros when nothing flowed into it.
    pub fn wrt(&self, tape: &Tape<S>, v: Var) -> Tensor<S> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Public sigmoid matching the tape primitive.
pub fn logistic<S: Scalar>(x: S) -> S {
    sigmoid(x)
}
