//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive applied during a forward pass. Each
//! node keeps its value; [`Graph::backward`] walks the tape in reverse and
//! applies the per-primitive vector-Jacobian rule. Graphs are single-threaded
//! and short-lived: build one per training step or evaluation batch.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{numel, row_major_strides, visit_strided, ParamStore, Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        a: Var,
        axis: usize,
        indices: Vec<usize>,
    },
    Expand(Var),
    Softmax(Var),
    LayerNorm {
        a: Var,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Tanh(Var),
    SumAxis {
        a: Var,
        axis: usize,
    },
    MeanAxis {
        a: Var,
        axis: usize,
    },
    SumAll(Var),
    MeanAll(Var),
}

struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<String, Var>,
    mode: Mode,
    rng: ChaCha8Rng,
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

/// `rhs` broadcasts against `lhs` when its shape equals a trailing slice of `lhs`.
fn broadcasts(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

impl<T: Scalar> Graph<T> {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Vec<T>,
        shape: Vec<usize>,
        op: Op<T>,
    ) -> Result<Var> {
        check_finite(name, &value)?;
        let requires_grad = self.op_requires_grad(&op);
        Ok(self.push(value, shape, op, requires_grad))
    }

    fn op_requires_grad(&self, op: &Op<T>) -> bool {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => rg(a) || rg(b),
            Op::MatMul { a, b, .. } => rg(a) || rg(b),
            Op::Concat { inputs, .. } => inputs.iter().any(rg),
            Op::Scale(a, _)
            | Op::Permute(a, _)
            | Op::Reshape(a)
            | Op::Expand(a)
            | Op::Softmax(a)
            | Op::Gelu(a)
            | Op::Tanh(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::Slice { a, .. }
            | Op::Gather { a, .. }
            | Op::LayerNorm { a, .. }
            | Op::SumAxis { a, .. }
            | Op::MeanAxis { a, .. } => rg(a),
        }
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        let mut t = Tensor::new(node.shape.clone(), node.value.clone()).expect("node shape");
        t.requires_grad = false;
        t
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Inserts a tensor that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::invalid(format!(
                "constant of shape {shape:?} given {} values",
                data.len()
            )));
        }
        Ok(self.push(data, shape, Op::Leaf, false))
    }

    /// Inserts a differentiable leaf that is not backed by a parameter store.
    pub fn variable(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, true)
    }

    /// Looks up a named parameter, inserting it as a leaf the first time.
    /// Frozen parameters (`requires_grad == false`) never receive gradients.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.require(name)?;
        let v = self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, t.requires_grad);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters touched by this graph, with their leaf handles.
    pub fn param_vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Vec<T>, Vec<usize>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcasts(sa, sb) {
            return Err(Error::shape(name, sa, sb));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let out = if va.len() == vb.len() {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let nb = vb.len();
            va.iter()
                .enumerate()
                .map(|(i, &x)| f(x, vb[i % nb]))
                .collect()
        };
        Ok((out, sa.to_vec()))
    }

    /// Elementwise sum; `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = if !broadcasts(self.shape(a), self.shape(b))
            && broadcasts(self.shape(b), self.shape(a))
        {
            (b, a)
        } else {
            (a, b)
        };
        let (v, s) = self.binary_broadcast("add", a, b, |x, y| x + y)?;
        self.push_checked("add", v, s, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, s) = self.binary_broadcast("sub", a, b, |x, y| x - y)?;
        self.push_checked("sub", v, s, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = if !broadcasts(self.shape(a), self.shape(b))
            && broadcasts(self.shape(b), self.shape(a))
        {
            (b, a)
        } else {
            (a, b)
        };
        let (v, s) = self.binary_broadcast("mul", a, b, |x, y| x * y)?;
        self.push_checked("mul", v, s, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).iter().map(|&x| x * c).collect();
        let s = self.shape(a).to_vec();
        self.push_checked("scale", v, s, Op::Scale(a, c))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).iter().map(|&x| gelu(x)).collect();
        let s = self.shape(a).to_vec();
        self.push_checked("gelu", v, s, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).iter().map(|&x| x.tanh()).collect();
        let s = self.shape(a).to_vec();
        self.push_checked("tanh", v, s, Op::Tanh(a))
    }

    // ---- linear algebra -------------------------------------------------

    /// Batched matrix product. `a` is `[..., m, k]`; `b` is either `[k, n]`
    /// (shared across the batch) or `[..., k, n]` with matching batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch_a = &sa[..sa.len() - 2];
        let shared_b = sb.len() == 2;
        if kb != k || (!shared_b && batch_a != &sb[..sb.len() - 2]) {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batch = numel(batch_a);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (va, vb) = (self.value(a), self.value(b));
            if shared_b {
                T::gemm(batch * m, k, n, va, (k as isize, 1), vb, (n as isize, 1), &mut out, T::zero());
            } else {
                for (i, c) in out.chunks_mut(m * n).enumerate() {
                    T::gemm(
                        m,
                        k,
                        n,
                        &va[i * m * k..],
                        (k as isize, 1),
                        &vb[i * k * n..],
                        (n as isize, 1),
                        c,
                        T::zero(),
                    );
                }
            }
        }
        let mut shape = batch_a.to_vec();
        shape.extend([m, n]);
        self.push_checked(
            "matmul",
            out,
            shape,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            },
        )
    }

    /// `x · w + bias` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ---- layout ---------------------------------------------------------

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::invalid(format!(
                "permute: axes {axes:?} invalid for shape {shape:?}"
            )));
        }
        let in_strides = row_major_strides(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&x| shape[x]).collect();
        let strides: Vec<usize> = axes.iter().map(|&x| in_strides[x]).collect();
        let src = self.value(a);
        let mut out = vec![T::zero(); src.len()];
        visit_strided(&out_shape, &strides, |o, i| out[o] = src[i]);
        self.push_checked("permute", out, out_shape, Op::Permute(a, axes.to_vec()))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::invalid("transpose needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let v = self.value(a).to_vec();
        self.push_checked("reshape", v, shape.to_vec(), Op::Reshape(a))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat axis {axis} out of range")));
        }
        let mut extent = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::shape("concat", &base, s));
            }
            extent += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * extent * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = extent;
        self.push_checked(
            "concat",
            out,
            shape,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid(format!(
                "slice {start}..{} on axis {axis} out of range for {shape:?}",
                start + len
            )));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push_checked("slice", out, out_shape, Op::Slice { a, axis, start })
    }

    /// Selects `indices` (repeats allowed) along `axis`.
    pub fn gather(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || indices.iter().any(|&i| i >= shape[axis]) {
            return Err(Error::invalid(format!(
                "gather indices out of range on axis {axis} for {shape:?}"
            )));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = self.value(a);
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * extent + i) * inner;
                out.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        self.push_checked(
            "gather",
            out,
            out_shape,
            Op::Gather {
                a,
                axis,
                indices: indices.to_vec(),
            },
        )
    }

    /// Broadcasts size-1 axes of `a` up to `shape` (same rank).
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != shape.len() || sa.iter().zip(shape).any(|(&x, &y)| x != y && x != 1) {
            return Err(Error::shape("expand", &sa, shape));
        }
        let strides: Vec<usize> = row_major_strides(&sa)
            .into_iter()
            .zip(&sa)
            .map(|(s, &d)| if d == 1 { 0 } else { s })
            .collect();
        let src = self.value(a);
        let mut out = vec![T::zero(); numel(shape)];
        visit_strided(shape, &strides, |o, i| out[o] = src[i]);
        self.push_checked("expand", out, shape.to_vec(), Op::Expand(a))
    }

    // ---- normalization --------------------------------------------------

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| Error::invalid("softmax of a scalar"))?;
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut sum = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum = sum + *x;
            }
            for x in row.iter_mut() {
                *x = *x / sum;
            }
        }
        self.push_checked("softmax", out, shape, Op::Softmax(a))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| Error::invalid("layer_norm of a scalar"))?;
        let eps = T::cst(LAYER_NORM_EPS);
        let nf = T::cst(n as f64);
        let mut out = self.value(a).to_vec();
        let mut rstd = Vec::with_capacity(out.len() / n.max(1));
        for row in out.chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * r;
            }
            rstd.push(r);
        }
        self.push_checked("layer_norm", out, shape, Op::LayerNorm { a, rstd })
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("reduce axis {axis} out of range for {shape:?}")));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = self.value(a);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..extent {
                let base = (o * extent + j) * inner;
                add_into(&mut out[o * inner..(o + 1) * inner], &src[base..base + inner]);
            }
        }
        if mean {
            let d = T::cst(extent as f64);
            out.iter_mut().for_each(|x| *x = *x / d);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        if mean {
            self.push_checked("mean_axis", out, out_shape, Op::MeanAxis { a, axis })
        } else {
            self.push_checked("sum_axis", out, out_shape, Op::SumAxis { a, axis })
        }
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().copied().sum::<T>();
        self.push_checked("sum_all", vec![s], Vec::new(), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.iter().copied().sum::<T>() / T::cst(v.len().max(1) as f64);
        self.push_checked("mean_all", vec![s], Vec::new(), Op::MeanAll(a))
    }

    // ---- stochastic regularizers ---------------------------------------

    /// Inverted dropout; identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if self.mode == Mode::Eval || p <= 0.0 {
            return Ok(a);
        }
        if p >= 1.0 {
            return Err(Error::invalid(format!("dropout probability {p} must be < 1")));
        }
        let keep = T::cst(1.0 / (1.0 - p));
        let n = self.value(a).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let m = self.constant_from(self.shape(a).to_vec(), mask)?;
        self.mul(a, m)
    }

    /// Stochastic depth: zeroes whole samples along axis 0 with probability
    /// `p`, rescaling survivors. Identity in eval mode or when `p == 0`.
    pub fn drop_path(&mut self, a: Var, p: f64) -> Result<Var> {
        if self.mode == Mode::Eval || p <= 0.0 {
            return Ok(a);
        }
        if p >= 1.0 {
            return Err(Error::invalid(format!("drop-path probability {p} must be < 1")));
        }
        let shape = self.shape(a).to_vec();
        let batch = *shape.first().ok_or_else(|| Error::invalid("drop_path of a scalar"))?;
        let per = numel(&shape[1..]);
        let keep = T::cst(1.0 / (1.0 - p));
        let mut mask = Vec::with_capacity(batch * per);
        for _ in 0..batch {
            let m = if self.rng.random::<f64>() < p { T::zero() } else { keep };
            mask.extend(std::iter::repeat_n(m, per));
        }
        let m = self.constant_from(shape, mask)?;
        self.mul(a, m)
    }

    // ---- backward -------------------------------------------------------

    /// Back-propagates from a single-element `loss`. Gradients from earlier
    /// calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        check_finite("loss", self.value(loss))?;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.backprop_node(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradients of every trainable parameter into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for (name, &v) in &self.params {
            if let (Some(g), Some(t)) = (self.grad(v), store.get_mut(name)) {
                if t.requires_grad {
                    t.accumulate_grad(g);
                }
            }
        }
    }

    fn grad_slot(&mut self, v: Var) -> Option<&mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop_node(&mut self, id: usize, g: &[T]) {
        // Detach the op so input values can be read while grads are written.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.grad_slot(*a) {
                    add_into(ga, g);
                }
                self.reduce_broadcast_into(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.grad_slot(*a) {
                    add_into(ga, g);
                }
                self.reduce_broadcast_into(*b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let nb = vb.len();
                let need_a = self.nodes[a.0].requires_grad;
                let need_b = self.nodes[b.0].requires_grad;
                let ga_c: Option<Vec<T>> =
                    need_a.then(|| g.iter().enumerate().map(|(i, &x)| x * vb[i % nb]).collect());
                let gb_c: Option<Vec<T>> =
                    need_b.then(|| g.iter().zip(va).map(|(&x, &y)| x * y).collect());
                if let (Some(c), Some(ga)) = (ga_c, self.grad_slot(*a)) {
                    add_into(ga, &c);
                }
                if let Some(c) = gb_c {
                    self.reduce_broadcast_into(*b, c);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                if let Some(ga) = self.grad_slot(*a) {
                    ga.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x * c);
                }
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            } => self.backprop_matmul(*a, *b, *batch, *m, *k, *n, *shared_b, g),
            Op::Permute(a, axes) => {
                let out_shape = self.nodes[id].shape.clone();
                let mut inv = vec![0; axes.len()];
                for (i, &x) in axes.iter().enumerate() {
                    inv[x] = i;
                }
                let strides_out = row_major_strides(&out_shape);
                let in_shape: Vec<usize> = inv.iter().map(|&x| out_shape[x]).collect();
                let strides: Vec<usize> = inv.iter().map(|&x| strides_out[x]).collect();
                if let Some(ga) = self.grad_slot(*a) {
                    visit_strided(&in_shape, &strides, |o, i| ga[o] = ga[o] + g[i]);
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.grad_slot(*a) {
                    add_into(ga, g);
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = self.nodes[id].shape.clone();
                let (outer, extent, inner) = split_axis(&out_shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.nodes[v.0].shape[*axis];
                    if let Some(gv) = self.grad_slot(v) {
                        for o in 0..outer {
                            let src = (o * extent + offset) * inner;
                            add_into(
                                &mut gv[o * len * inner..(o + 1) * len * inner],
                                &g[src..src + len * inner],
                            );
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let len = self.nodes[id].shape[*axis];
                let in_shape = self.nodes[a.0].shape.clone();
                let (outer, extent, inner) = split_axis(&in_shape, *axis);
                if let Some(ga) = self.grad_slot(*a) {
                    for o in 0..outer {
                        let dst = (o * extent + start) * inner;
                        add_into(
                            &mut ga[dst..dst + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                }
            }
            Op::Gather { a, axis, indices } => {
                let in_shape = self.nodes[a.0].shape.clone();
                let (outer, extent, inner) = split_axis(&in_shape, *axis);
                let count = indices.len();
                if let Some(ga) = self.grad_slot(*a) {
                    for o in 0..outer {
                        for (j, &i) in indices.iter().enumerate() {
                            let dst = (o * extent + i) * inner;
                            let src = (o * count + j) * inner;
                            add_into(&mut ga[dst..dst + inner], &g[src..src + inner]);
                        }
                    }
                }
            }
            Op::Expand(a) => {
                let out_shape = self.nodes[id].shape.clone();
                let sa = self.nodes[a.0].shape.clone();
                let strides: Vec<usize> = row_major_strides(&sa)
                    .into_iter()
                    .zip(&sa)
                    .map(|(s, &d)| if d == 1 { 0 } else { s })
                    .collect();
                if let Some(ga) = self.grad_slot(*a) {
                    visit_strided(&out_shape, &strides, |o, i| ga[i] = ga[i] + g[o]);
                }
            }
            Op::Softmax(a) => {
                let n = *self.nodes[id].shape.last().unwrap_or(&1);
                let y = &self.nodes[id].value;
                let mut c = vec![T::zero(); y.len()];
                for ((cr, yr), gr) in c.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for ((d, &p), &q) in cr.iter_mut().zip(yr).zip(gr) {
                        *d = p * (q - dot);
                    }
                }
                if let Some(ga) = self.grad_slot(*a) {
                    add_into(ga, &c);
                }
            }
            Op::LayerNorm { a, rstd } => {
                let n = *self.nodes[id].shape.last().unwrap_or(&1);
                let nf = T::cst(n as f64);
                let xhat = &self.nodes[id].value;
                let mut c = vec![T::zero(); xhat.len()];
                for (((cr, xr), gr), &r) in c
                    .chunks_mut(n)
                    .zip(xhat.chunks(n))
                    .zip(g.chunks(n))
                    .zip(rstd)
                {
                    let mean_g = gr.iter().copied().sum::<T>() / nf;
                    let mean_gx = gr.iter().zip(xr).map(|(&p, &q)| p * q).sum::<T>() / nf;
                    for ((d, &x), &gg) in cr.iter_mut().zip(xr).zip(gr) {
                        *d = r * (gg - mean_g - x * mean_gx);
                    }
                }
                if let Some(ga) = self.grad_slot(*a) {
                    add_into(ga, &c);
                }
            }
            Op::Gelu(a) => {
                let c: Vec<T> = self.nodes[a.0]
                    .value
                    .iter()
                    .zip(g)
                    .map(|(&x, &gg)| gg * gelu_grad(x))
                    .collect();
                if let Some(ga) = self.grad_slot(*a) {
                    add_into(ga, &c);
                }
            }
            Op::Tanh(a) => {
                let c: Vec<T> = self.nodes[id]
                    .value
                    .iter()
                    .zip(g)
                    .map(|(&y, &gg)| gg * (T::one() - y * y))
                    .collect();
                if let Some(ga) = self.grad_slot(*a) {
                    add_into(ga, &c);
                }
            }
            Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
                let in_shape = self.nodes[a.0].shape.clone();
                let (outer, extent, inner) = split_axis(&in_shape, *axis);
                let scale = if matches!(op, Op::MeanAxis { .. }) {
                    T::one() / T::cst(extent as f64)
                } else {
                    T::one()
                };
                if let Some(ga) = self.grad_slot(*a) {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for j in 0..extent {
                            let base = (o * extent + j) * inner;
                            ga[base..base + inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &x)| *d = *d + x * scale);
                        }
                    }
                }
            }
            Op::SumAll(a) | Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.len();
                let c = if matches!(op, Op::MeanAll(_)) {
                    g[0] / T::cst(n.max(1) as f64)
                } else {
                    g[0]
                };
                if let Some(ga) = self.grad_slot(*a) {
                    ga.iter_mut().for_each(|d| *d = *d + c);
                }
            }
        }
        self.nodes[id].op = op;
    }

    /// Adds `contrib` (shaped like the broadcast output) into the gradient of
    /// `b`, summing over the broadcast leading axes.
    fn reduce_broadcast_into(&mut self, b: Var, contrib: Vec<T>) {
        let nb = self.nodes[b.0].value.len();
        if let Some(gb) = self.grad_slot(b) {
            if contrib.len() == nb {
                add_into(gb, &contrib);
            } else {
                for chunk in contrib.chunks(nb) {
                    add_into(gb, chunk);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_matmul(
        &mut self,
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
        g: &[T],
    ) {
        let need_a = self.nodes[a.0].requires_grad;
        let need_b = self.nodes[b.0].requires_grad;
        if need_a {
            // dA = dC · Bᵀ
            let vb = if a == b {
                self.nodes[b.0].value.clone()
            } else {
                std::mem::take(&mut self.nodes[b.0].value)
            };
            if let Some(ga) = self.grad_slot(a) {
                if shared_b {
                    T::gemm(batch * m, n, k, g, (n as isize, 1), &vb, (1, n as isize), ga, T::one());
                } else {
                    for i in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..],
                            (n as isize, 1),
                            &vb[i * k * n..],
                            (1, n as isize),
                            &mut ga[i * m * k..],
                            T::one(),
                        );
                    }
                }
            }
            if a != b {
                self.nodes[b.0].value = vb;
            }
        }
        if need_b {
            // dB = Aᵀ · dC
            let va = if a == b {
                self.nodes[a.0].value.clone()
            } else {
                std::mem::take(&mut self.nodes[a.0].value)
            };
            if let Some(gb) = self.grad_slot(b) {
                if shared_b {
                    T::gemm(k, batch * m, n, &va, (1, k as isize), g, (n as isize, 1), gb, T::one());
                } else {
                    for i in 0..batch {
                        T::gemm(
                            k,
                            m,
                            n,
                            &va[i * m * k..],
                            (1, k as isize),
                            &g[i * m * n..],
                            (n as isize, 1),
                            &mut gb[i * k * n..],
                            T::one(),
                        );
                    }
                }
            }
            if a != b {
                self.nodes[a.0].value = va;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// GELU, tanh approximation.
fn gelu<T: Scalar>(x: T) -> T {
    let half = T::cst(0.5);
    let u = T::cst(GELU_C) * (x + T::cst(GELU_K) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::cst(0.5);
    let u = T::cst(GELU_C) * (x + T::cst(GELU_K) * x * x * x);
    let t = u.tanh();
    let du = T::cst(GELU_C) * (T::one() + T::cst(3.0 * GELU_K) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}
