use std::cell::{Ref, RefCell};

use super::kernels::{self, ConvGeometry, Layout};
use super::{check_permutation, numel, resolve_axis, Real, Tensor};
use crate::error::{Error, Result};

/// Recorded operation with the parent ids needed to replay the chain rule.
enum Op<T> {
    Leaf,
    /// `b` may be a trailing-suffix broadcast of `a`.
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Square(usize),
    Sqrt(usize),
    Exp(usize),
    /// Keeps the tanh terms of the forward pass.
    Gelu { x: usize, tanh: Vec<T> },
    Relu(usize),
    Sum(usize),
    Mean(usize),
    MeanAxis { x: usize, axis: usize },
    Softmax { x: usize, axis: usize },
    /// Output value holds the normalized input; `rstd` the per-slice 1/σ.
    LayerNorm { x: usize, axis: usize, rstd: Vec<T> },
    MatMul { a: usize, b: usize, ta: bool, tb: bool, shared: bool },
    Reshape(usize),
    Permute { x: usize, axes: Vec<usize> },
    Narrow { x: usize, axis: usize, start: usize },
    Concat { parts: Vec<usize>, axis: usize },
    IndexSelect { x: usize, indices: Vec<usize> },
    Expand { x: usize, axis: usize },
    Im2Col { x: usize, geom: ConvGeometry },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Accumulated gradient; only leaves keep one after `backward`.
    grad: Option<Vec<T>>,
}

/// A tape of operations. Nodes are appended in evaluation order, so the
/// reverse of insertion order is always a valid backward order.
///
/// The graph is single-threaded (`!Sync`); parallelism lives inside the
/// numeric kernels of individual operations.
pub struct Graph<T: Real> {
    tape: RefCell<Vec<Node<T>>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { tape: RefCell::new(Vec::new()) }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.tape.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// Clear every accumulated gradient.
    pub fn zero_grads(&self) {
        for n in self.tape.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut tape = self.tape.borrow_mut();
        tape.push(Node { value, op, requires_grad, grad: None });
        Var { graph: self, id: tape.len() - 1 }
    }

    fn node(&self, id: usize) -> Ref<'_, Node<T>> {
        Ref::map(self.tape.borrow(), |t| &t[id])
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let tape = self.tape.borrow();
        ids.iter().any(|&i| tape[i].requires_grad)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat<'g>(&'g self, parts: &[Var<'g, T>], axis: isize) -> Result<Var<'g, T>> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let first = parts[0].shape();
        let ax = resolve_axis(&first, axis)?;
        let mut out_shape = first.clone();
        out_shape[ax] = 0;
        for p in parts {
            let s = p.shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == ax || a == b);
            if !compatible {
                return Err(Error::Shape(format!("cannot concat {first:?} with {s:?} on axis {ax}")));
            }
            out_shape[ax] += s[ax];
        }
        let (outer, _, inner) = kernels::split_axis(&out_shape, ax);
        let mut data = Vec::with_capacity(numel(&out_shape));
        {
            let tape = self.tape.borrow();
            for o in 0..outer {
                for p in parts {
                    let v = &tape[p.id].value;
                    let block = v.shape[ax] * inner;
                    data.extend_from_slice(&v.data[o * block..(o + 1) * block]);
                }
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.needs(&ids);
        Ok(self.push(Tensor::raw(out_shape, data), Op::Concat { parts: ids, axis: ax }, rg))
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients accumulate into
    /// leaves across calls until [`Graph::zero_grads`].
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let mut tape = self.tape.borrow_mut();
        let root = loss.id;
        if tape[root].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                tape[root].value.shape
            )));
        }
        if !tape[root].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(vec![T::one()]);
        let mut leaf_updates = Vec::new();

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &tape[id];
            if !node.requires_grad {
                continue;
            }
            let val = |i: usize| -> &Tensor<T> { &tape[i].value };
            let rg = |i: usize| tape[i].requires_grad;
            match &node.op {
                Op::Leaf => leaf_updates.push((id, g)),
                &Op::Add(a, b) | &Op::Sub(a, b) => {
                    let negate = matches!(node.op, Op::Sub(..));
                    if rg(b) {
                        let bl = val(b).len();
                        if bl == g.len() {
                            let d = if negate { g.iter().map(|&x| -x).collect() } else { g.clone() };
                            accumulate(&mut grads, b, d);
                        } else {
                            let acc = slot(&mut grads, b, bl);
                            if negate {
                                let mut part = vec![T::zero(); bl];
                                kernels::reduce_blocks_into(&mut part, &g, None);
                                acc.iter_mut().zip(part).for_each(|(o, v)| *o -= v);
                            } else {
                                kernels::reduce_blocks_into(acc, &g, None);
                            }
                        }
                    }
                    if rg(a) {
                        accumulate(&mut grads, a, g);
                    }
                }
                &Op::Mul(a, b) => {
                    let (av, bv) = (&val(a).data, &val(b).data);
                    if rg(b) {
                        if bv.len() == g.len() {
                            accumulate(&mut grads, b, kernels::map_binary(&g, av, |x, y| x * y));
                        } else {
                            kernels::reduce_blocks_into(slot(&mut grads, b, bv.len()), &g, Some(av));
                        }
                    }
                    if rg(a) {
                        let da = if bv.len() == g.len() {
                            kernels::map_binary(&g, bv, |x, y| x * y)
                        } else {
                            kernels::map_broadcast(&g, bv, |x, y| x * y)
                        };
                        accumulate(&mut grads, a, da);
                    }
                }
                &Op::Scale(a, c) => {
                    accumulate(&mut grads, a, kernels::map_unary(&g, |x| x * c));
                }
                &Op::Square(a) => {
                    let two = T::lit(2.0);
                    let d = kernels::map_binary(&g, &val(a).data, |x, y| two * x * y);
                    accumulate(&mut grads, a, d);
                }
                &Op::Sqrt(a) => {
                    let half = T::lit(0.5);
                    let d = kernels::map_binary(&g, &node.value.data, |x, y| half * x / y);
                    accumulate(&mut grads, a, d);
                }
                &Op::Exp(a) => {
                    let d = kernels::map_binary(&g, &node.value.data, |x, y| x * y);
                    accumulate(&mut grads, a, d);
                }
                Op::Gelu { x, tanh } => {
                    accumulate(&mut grads, *x, kernels::gelu_backward(&val(*x).data, tanh, &g));
                }
                &Op::Relu(a) => {
                    let d = kernels::map_binary(&g, &val(a).data, |x, y| {
                        if y > T::zero() {
                            x
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(&mut grads, a, d);
                }
                &Op::Sum(a) => {
                    accumulate(&mut grads, a, vec![g[0]; val(a).len()]);
                }
                &Op::Mean(a) => {
                    let n = val(a).len();
                    let v = g[0] / T::from_usize(n).unwrap();
                    accumulate(&mut grads, a, vec![v; n]);
                }
                &Op::MeanAxis { x, axis } => {
                    let (outer, n, inner) = kernels::split_axis(&val(x).shape, axis);
                    let inv = T::one() / T::from_usize(n).unwrap();
                    let mut d = vec![T::zero(); outer * n * inner];
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                d[(o * n + j) * inner + i] = g[o * inner + i] * inv;
                            }
                        }
                    }
                    accumulate(&mut grads, x, d);
                }
                &Op::Softmax { x, axis } => {
                    let (_, n, inner) = kernels::split_axis(&node.value.shape, axis);
                    let d = kernels::softmax_backward(&node.value.data, &g, n, inner);
                    accumulate(&mut grads, x, d);
                }
                Op::LayerNorm { x, axis, rstd } => {
                    let (_, n, inner) = kernels::split_axis(&node.value.shape, *axis);
                    let d = kernels::layer_norm_backward(&node.value.data, rstd, &g, n, inner);
                    accumulate(&mut grads, *x, d);
                }
                &Op::MatMul { a, b, ta, tb, shared } => {
                    let (av, bv) = (val(a), val(b));
                    if rg(a) {
                        let da = slot(&mut grads, a, av.len());
                        matmul_backward_a(av, bv, &g, ta, tb, shared, da);
                    }
                    if rg(b) {
                        let db = slot(&mut grads, b, bv.len());
                        matmul_backward_b(av, bv, &g, ta, tb, shared, db);
                    }
                }
                &Op::Reshape(a) => accumulate(&mut grads, a, g),
                Op::Permute { x, axes } => {
                    let xs = &val(*x).shape;
                    let mut d = vec![T::zero(); g.len()];
                    kernels::permute_into(xs, &g, axes, &mut d, true);
                    accumulate(&mut grads, *x, d);
                }
                &Op::Narrow { x, axis, start } => {
                    let xs = &val(x).shape;
                    let (outer, n, inner) = kernels::split_axis(xs, axis);
                    let len = node.value.shape[axis];
                    let d = slot(&mut grads, x, numel(xs));
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        d[dst..dst + len * inner].iter_mut().zip(src).for_each(|(o, &v)| *o += v);
                    }
                }
                Op::Concat { parts, axis } => {
                    let (outer, _, inner) = kernels::split_axis(&node.value.shape, *axis);
                    let mut offset = 0;
                    let mut pieces: Vec<Vec<T>> =
                        parts.iter().map(|&p| Vec::with_capacity(val(p).len())).collect();
                    for o in 0..outer {
                        for (k, &p) in parts.iter().enumerate() {
                            let block = val(p).shape[*axis] * inner;
                            pieces[k].extend_from_slice(&g[offset..offset + block]);
                            offset += block;
                            let _ = o;
                        }
                    }
                    for (&p, piece) in parts.iter().zip(pieces) {
                        if rg(p) {
                            accumulate(&mut grads, p, piece);
                        }
                    }
                }
                Op::IndexSelect { x, indices } => {
                    let xv = val(*x);
                    let row = xv.len() / xv.shape[0];
                    let d = slot(&mut grads, *x, xv.len());
                    for (k, &src) in indices.iter().enumerate() {
                        for (o, &v) in d[src * row..(src + 1) * row].iter_mut().zip(&g[k * row..(k + 1) * row]) {
                            *o += v;
                        }
                    }
                }
                &Op::Expand { x, axis } => {
                    let (outer, n, inner) = kernels::split_axis(&node.value.shape, axis);
                    let d = slot(&mut grads, x, outer * inner);
                    for o in 0..outer {
                        kernels::reduce_blocks_into(&mut d[o * inner..(o + 1) * inner], &g[o * n * inner..(o + 1) * n * inner], None);
                    }
                }
                Op::Im2Col { x, geom } => {
                    accumulate(&mut grads, *x, kernels::col2im(&g, geom));
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let b = labels.len();
                    let k = probs.len() / b;
                    let scale = g[0] / T::from_usize(b).unwrap();
                    let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        d[r * k + l] -= scale;
                    }
                    accumulate(&mut grads, *logits, d);
                }
            }
        }

        for (id, g) in leaf_updates {
            let slot = &mut tape[id].grad;
            match slot {
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v;
                    }
                }
                None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], id: usize, g: Vec<T>) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// The gradient buffer of `id`, created zeroed on first use.
fn slot<T: Real>(grads: &mut [Option<Vec<T>>], id: usize, len: usize) -> &mut Vec<T> {
    grads[id].get_or_insert_with(|| vec![T::zero(); len])
}

/// `(m, k, n, batch)` of `op(a)·op(b)`.
fn matmul_dims<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    ta: bool,
    tb: bool,
) -> Result<(usize, usize, usize, usize, bool)> {
    let (ra, rb) = (a.rank(), b.rank());
    if ra < 2 || rb < 2 {
        return Err(Error::Shape(format!(
            "matmul needs rank ≥ 2 operands, got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (m, ka) = if ta { (a.shape[ra - 1], a.shape[ra - 2]) } else { (a.shape[ra - 2], a.shape[ra - 1]) };
    let (kb, n) = if tb { (b.shape[rb - 1], b.shape[rb - 2]) } else { (b.shape[rb - 2], b.shape[rb - 1]) };
    if ka != kb {
        return Err(Error::Shape(format!(
            "matmul inner extents differ: {:?} · {:?}",
            a.shape, b.shape
        )));
    }
    let shared = rb == 2 && !ta && ra > 2;
    if shared {
        return Ok((m, ka, n, numel(&a.shape[..ra - 2]), true));
    }
    if a.shape[..ra - 2] != b.shape[..rb - 2] {
        return Err(Error::Shape(format!(
            "matmul batch extents differ: {:?} · {:?}",
            a.shape, b.shape
        )));
    }
    Ok((m, ka, n, numel(&a.shape[..ra - 2]), false))
}

/// `da += g·op(b)ᵀ` (stored in `a`'s layout).
fn matmul_backward_a<T: Real>(a: &Tensor<T>, b: &Tensor<T>, g: &[T], ta: bool, tb: bool, shared: bool, da: &mut [T]) {
    let (m, k, n, batch, _) = matmul_dims(a, b, ta, tb).expect("validated at forward");
    let b_cols = if tb { k } else { n };
    if shared {
        kernels::rows_gemm(batch * m, n, k, g, &b.data, Layout::row_major(b_cols, !tb), da, true);
    } else if ta {
        // dA is stored k×m: op(B)·Gᵀ
        kernels::batched_gemm(
            batch, k, n, m,
            &b.data, k * n, Layout::row_major(b_cols, tb),
            g, m * n, Layout::row_major(n, true),
            da, true,
        );
    } else {
        kernels::batched_gemm(
            batch, m, n, k,
            g, m * n, Layout::row_major(n, false),
            &b.data, k * n, Layout::row_major(b_cols, !tb),
            da, true,
        );
    }
}

/// `db += op(a)ᵀ·g` (stored in `b`'s layout).
fn matmul_backward_b<T: Real>(a: &Tensor<T>, b: &Tensor<T>, g: &[T], ta: bool, tb: bool, shared: bool, db: &mut [T]) {
    let (m, k, n, batch, _) = matmul_dims(a, b, ta, tb).expect("validated at forward");
    let a_cols = if ta { m } else { k };
    if shared {
        kernels::rows_gemm_weight_grad(batch * m, k, n, &a.data, g, db, tb);
    } else if tb {
        // dB is stored n×k: Gᵀ·op(A)
        kernels::batched_gemm(
            batch, n, m, k,
            g, m * n, Layout::row_major(n, true),
            &a.data, m * k, Layout::row_major(a_cols, ta),
            db, true,
        );
    } else {
        kernels::batched_gemm(
            batch, k, m, n,
            &a.data, m * k, Layout::row_major(a_cols, !ta),
            g, m * n, Layout::row_major(n, false),
            db, true,
        );
    }
}

fn broadcast_compatible(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl<'g, T: Real> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.node(self.id).value.shape.clone()
    }

    pub fn value(&self) -> Tensor<T> {
        self.graph.node(self.id).value.clone()
    }

    /// Borrow the value without copying.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.graph.node(self.id).value)
    }

    /// The single element of a scalar.
    pub fn item(&self) -> T {
        self.graph.node(self.id).value.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.node(self.id).requires_grad
    }

    /// Accumulated gradient, absent if no backward pass reached this node.
    pub fn grad(&self) -> Option<Tensor<T>> {
        let node = self.graph.node(self.id);
        node.grad.as_ref().map(|g| Tensor::raw(node.value.shape.clone(), g.clone()))
    }

    fn unary(self, op: Op<T>, f: impl FnOnce(&Tensor<T>) -> Tensor<T>) -> Var<'g, T> {
        let (value, rg) = {
            let n = self.graph.node(self.id);
            (f(&n.value), n.requires_grad)
        };
        self.graph.push(value, op, rg)
    }

    fn elementwise(
        self,
        other: Var<'g, T>,
        name: &str,
        make: fn(usize, usize) -> Op<T>,
        f: impl Fn(T, T) -> T + Sync + Send,
    ) -> Result<Var<'g, T>> {
        let value = {
            let tape = self.graph.tape.borrow();
            let (a, b) = (&tape[self.id].value, &tape[other.id].value);
            if !broadcast_compatible(&a.shape, &b.shape) {
                return Err(Error::Shape(format!(
                    "{name}: cannot broadcast {:?} onto {:?}",
                    b.shape, a.shape
                )));
            }
            let data = if a.len() == b.len() {
                kernels::map_binary(&a.data, &b.data, f)
            } else {
                kernels::map_broadcast(&a.data, &b.data, f)
            };
            Tensor::raw(a.shape.clone(), data)
        };
        let rg = self.graph.needs(&[self.id, other.id]);
        Ok(self.graph.push(value, make(self.id, other.id), rg))
    }

    /// Elementwise sum; `other` may broadcast over leading axes.
    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.elementwise(other, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.elementwise(other, "sub", Op::Sub, |x, y| x - y)
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.elementwise(other, "mul", Op::Mul, |x, y| x * y)
    }

    pub fn scale(self, c: T) -> Var<'g, T> {
        self.unary(Op::Scale(self.id, c), |t| t.map(|x| x * c))
    }

    pub fn square(self) -> Var<'g, T> {
        self.unary(Op::Square(self.id), |t| Tensor::raw(t.shape.clone(), kernels::map_unary(&t.data, |x| x * x)))
    }

    pub fn sqrt(self) -> Var<'g, T> {
        self.unary(Op::Sqrt(self.id), |t| t.map(|x| x.sqrt()))
    }

    pub fn exp(self) -> Var<'g, T> {
        self.unary(Op::Exp(self.id), |t| t.map(|x| x.exp()))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(self) -> Var<'g, T> {
        let (value, tanh, rg) = {
            let n = self.graph.node(self.id);
            let (y, t) = kernels::gelu_forward(&n.value.data);
            (Tensor::raw(n.value.shape.clone(), y), t, n.requires_grad)
        };
        self.graph.push(value, Op::Gelu { x: self.id, tanh }, rg)
    }

    pub fn relu(self) -> Var<'g, T> {
        self.unary(Op::Relu(self.id), |t| t.map(|x| x.max(T::zero())))
    }

    pub fn sum(self) -> Var<'g, T> {
        self.unary(Op::Sum(self.id), |t| Tensor::scalar(t.data.iter().copied().sum()))
    }

    pub fn mean(self) -> Var<'g, T> {
        self.unary(Op::Mean(self.id), |t| {
            let s: T = t.data.iter().copied().sum();
            Tensor::scalar(s / T::from_usize(t.len()).unwrap())
        })
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(self, axis: isize) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let ax = resolve_axis(&shape, axis)?;
        let (outer, n, inner) = kernels::split_axis(&shape, ax);
        let mut out_shape = shape.clone();
        out_shape.remove(ax);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(self.unary(Op::MeanAxis { x: self.id, axis: ax }, |t| {
            let inv = T::one() / T::from_usize(n).unwrap();
            let mut d = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for j in 0..n {
                    for i in 0..inner {
                        d[o * inner + i] += t.data[(o * n + j) * inner + i];
                    }
                }
            }
            d.iter_mut().for_each(|x| *x *= inv);
            Tensor::raw(out_shape, d)
        }))
    }

    pub fn softmax(self, axis: isize) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let ax = resolve_axis(&shape, axis)?;
        let (outer, n, inner) = kernels::split_axis(&shape, ax);
        Ok(self.unary(Op::Softmax { x: self.id, axis: ax }, |t| {
            Tensor::raw(t.shape.clone(), kernels::softmax_forward(&t.data, outer, n, inner))
        }))
    }

    /// Normalize to zero mean and unit variance along `axis` (no affine).
    pub fn layer_norm(self, axis: isize, eps: T) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let ax = resolve_axis(&shape, axis)?;
        let (outer, n, inner) = kernels::split_axis(&shape, ax);
        let (value, rstd, rg) = {
            let node = self.graph.node(self.id);
            let (y, rstd) = kernels::layer_norm_forward(&node.value.data, outer, n, inner, eps);
            (Tensor::raw(shape.clone(), y), rstd, node.requires_grad)
        };
        Ok(self.graph.push(value, Op::LayerNorm { x: self.id, axis: ax, rstd }, rg))
    }

    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.matmul_t(other, false, false)
    }

    /// `op(self)·op(other)` where `op` optionally transposes the last two
    /// axes. A rank-2 right operand is shared across all leading axes of
    /// the left one.
    pub fn matmul_t(self, other: Var<'g, T>, ta: bool, tb: bool) -> Result<Var<'g, T>> {
        let value = {
            let tape = self.graph.tape.borrow();
            let (a, b) = (&tape[self.id].value, &tape[other.id].value);
            let (m, k, n, batch, shared) = matmul_dims(a, b, ta, tb)?;
            let a_cols = if ta { m } else { k };
            let b_cols = if tb { k } else { n };
            let mut out_shape = a.shape[..a.rank() - 2].to_vec();
            out_shape.extend([m, n]);
            let mut c = vec![T::zero(); batch * m * n];
            if shared {
                kernels::rows_gemm(batch * m, k, n, &a.data, &b.data, Layout::row_major(b_cols, tb), &mut c, false);
            } else {
                kernels::batched_gemm(
                    batch, m, k, n,
                    &a.data, m * k, Layout::row_major(a_cols, ta),
                    &b.data, k * n, Layout::row_major(b_cols, tb),
                    &mut c, false,
                );
            }
            let shared_flag = shared;
            (Tensor::raw(out_shape, c), shared_flag)
        };
        let rg = self.graph.needs(&[self.id, other.id]);
        let (value, shared) = value;
        Ok(self.graph.push(value, Op::MatMul { a: self.id, b: other.id, ta, tb, shared }, rg))
    }

    /// Same storage, new shape; nothing is copied.
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let value = self.value().reshape(shape)?;
        let rg = self.requires_grad();
        Ok(self.graph.push(value, Op::Reshape(self.id), rg))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'g, T>> {
        check_permutation(&self.shape(), axes)?;
        Ok(self.unary(Op::Permute { x: self.id, axes: axes.to_vec() }, |t| {
            let (shape, data) = kernels::permute(&t.shape, &t.data, axes);
            Tensor::raw(shape, data)
        }))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(self, axis: isize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let ax = resolve_axis(&shape, axis)?;
        if len == 0 || start + len > shape[ax] {
            return Err(Error::Shape(format!(
                "narrow [{start}, {}) out of range for axis {ax} of {shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = kernels::split_axis(&shape, ax);
        let mut out_shape = shape.clone();
        out_shape[ax] = len;
        Ok(self.unary(Op::Narrow { x: self.id, axis: ax, start }, |t| {
            let mut d = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let s = (o * n + start) * inner;
                d.extend_from_slice(&t.data[s..s + len * inner]);
            }
            Tensor::raw(out_shape, d)
        }))
    }

    /// Gather rows along the leading axis.
    pub fn index_select(self, indices: &[usize]) -> Result<Var<'g, T>> {
        let shape = self.shape();
        if indices.is_empty() {
            return Err(Error::Shape("index_select with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[0]) {
            return Err(Error::Shape(format!("index {bad} out of range for {shape:?}")));
        }
        let mut out_shape = shape.clone();
        out_shape[0] = indices.len();
        Ok(self.unary(Op::IndexSelect { x: self.id, indices: indices.to_vec() }, |t| {
            let row = t.len() / t.shape[0];
            let mut d = Vec::with_capacity(indices.len() * row);
            for &i in indices {
                d.extend_from_slice(&t.data[i * row..(i + 1) * row]);
            }
            Tensor::raw(out_shape, d)
        }))
    }

    /// Repeat a unit-extent `axis` `n` times.
    pub fn expand(self, axis: isize, n: usize) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let ax = resolve_axis(&shape, axis)?;
        if shape[ax] != 1 || n == 0 {
            return Err(Error::Shape(format!("cannot expand axis {ax} of {shape:?} to {n}")));
        }
        let (outer, _, inner) = kernels::split_axis(&shape, ax);
        let mut out_shape = shape.clone();
        out_shape[ax] = n;
        Ok(self.unary(Op::Expand { x: self.id, axis: ax }, |t| {
            let mut d = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                let block = &t.data[o * inner..(o + 1) * inner];
                for _ in 0..n {
                    d.extend_from_slice(block);
                }
            }
            Tensor::raw(out_shape, d)
        }))
    }

    /// Unfold an NHWC tensor into convolution rows.
    pub fn im2col(self, kernel: usize, stride: usize, pad: usize) -> Result<Var<'g, T>> {
        let shape = self.shape();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("im2col expects NHWC, got {shape:?}")));
        }
        let geom = ConvGeometry {
            batch: shape[0],
            height: shape[1],
            width: shape[2],
            channels: shape[3],
            kernel,
            stride,
            pad,
        };
        if kernel == 0 || stride == 0 || geom.height + 2 * pad < kernel || geom.width + 2 * pad < kernel {
            return Err(Error::Shape(format!("invalid convolution window for {shape:?}")));
        }
        let out_shape = [geom.batch, geom.out_height(), geom.out_width(), geom.patch_len()];
        Ok(self.unary(Op::Im2Col { x: self.id, geom }, |t| {
            Tensor::raw(out_shape.to_vec(), kernels::im2col(&t.data, &geom))
        }))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'g, T>> {
        let shape = self.shape();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::Shape(format!(
                "cross_entropy expects [batch, classes] logits matching {} labels, got {shape:?}",
                labels.len()
            )));
        }
        let k = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Shape(format!("label {bad} out of range for {k} classes")));
        }
        let (loss, probs, rg) = {
            let node = self.graph.node(self.id);
            let probs = kernels::softmax_forward(&node.value.data, labels.len(), k, 1);
            let tiny = T::min_positive_value();
            let mut loss = T::zero();
            for (r, &l) in labels.iter().enumerate() {
                loss -= probs[r * k + l].max(tiny).ln();
            }
            (loss / T::from_usize(labels.len()).unwrap(), probs, node.requires_grad)
        };
        Ok(self.graph.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: self.id, labels: labels.to_vec(), probs },
            rg,
        ))
    }
}
