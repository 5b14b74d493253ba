//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Values
//! are computed eagerly; [`Graph::backward`] walks the tape in reverse and
//! accumulates exact gradients into the leaves.
//!
//! Elementwise binary operations broadcast numpy-style (shapes aligned on the
//! right, size-1 dimensions stretched). Every operation validates shapes and
//! reports failures with the current scope path, e.g.
//! `encoder/block0/attn/matmul: inner dims 32 vs 16`.

use std::collections::BTreeMap;

use super::memory;
use super::params::{Gradients, ParamStore};
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var, usize),
    Exp(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sqrt(Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Select(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Gradient buffer charged to the memory meter while alive.
struct GradBuf<T>(Vec<T>);

impl<T> GradBuf<T> {
    fn new(v: Vec<T>) -> Self {
        memory::charge(std::mem::size_of_val(v.as_slice()));
        GradBuf(v)
    }
}

impl<T> Drop for GradBuf<T> {
    fn drop(&mut self) {
        memory::release(std::mem::size_of_val(self.0.as_slice()));
    }
}

/// Computation tape. Parameters are bound lazily from an optional
/// [`ParamStore`]; paths matching a frozen prefix are recorded as constants.
pub struct Graph<'p, T: Real> {
    nodes: Vec<Node<T>>,
    store: Option<&'p ParamStore<T>>,
    bound: BTreeMap<String, Var>,
    frozen: Vec<String>,
    scope: Vec<String>,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            store: None,
            bound: BTreeMap::new(),
            frozen: Vec::new(),
            scope: Vec::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Graph {
            store: Some(store),
            ..Self::new()
        }
    }

    /// Parameters whose path starts with `prefix` receive no gradient.
    pub fn freeze(mut self, prefix: impl Into<String>) -> Self {
        self.frozen.push(prefix.into());
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.scope.push(name.to_string());
        let out = f(self);
        self.scope.pop();
        out
    }

    fn err(&self, op: &str, detail: String) -> Error {
        let mut path = self.scope.join("/");
        if !path.is_empty() {
            path.push('/');
        }
        path.push_str(op);
        Error::Shape { op: path, detail }
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Concat(xs, _) => xs.iter().any(|x| self.nodes[x.0].needs_grad),
            other => parents(other).iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(t, false)
    }

    /// A leaf that is differentiated iff `t.requires_grad()`.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let g = t.requires_grad();
        self.push_leaf(t, g)
    }

    /// Binds the parameter at `path` (once per graph).
    pub fn param(&mut self, path: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(path) {
            return Ok(v);
        }
        let store = self
            .store
            .ok_or_else(|| self.err("param", format!("no parameter store bound for {path}")))?;
        let t = store
            .get(path)
            .ok_or_else(|| self.err("param", format!("unknown parameter {path}")))?
            .clone();
        let trainable = !self.frozen.iter().any(|p| path.starts_with(p.as_str()));
        let v = self.push_leaf(t, trainable);
        self.bound.insert(path.to_string(), v);
        Ok(v)
    }

    // ---- elementwise binary -------------------------------------------

    fn binary(&mut self, name: &str, a: Var, b: Var, op: Op, f: impl Fn(T, T) -> T) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb)
            .ok_or_else(|| self.err(name, format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else if let (true, Some(nb)) = (sa == out_shape, suffix_numel(&sb, &out_shape)) {
            av.chunks_exact(nb)
                .flat_map(|c| c.iter().zip(bv).map(|(&x, &y)| f(x, y)))
                .collect()
        } else if let (true, Some(na)) = (sb == out_shape, suffix_numel(&sa, &out_shape)) {
            bv.chunks_exact(na)
                .flat_map(|c| av.iter().zip(c).map(|(&x, &y)| f(x, y)))
                .collect()
        } else {
            let n: usize = out_shape.iter().product();
            let mut out = vec![T::zero(); n];
            let stra = bcast_strides(&sa, &out_shape);
            let strb = bcast_strides(&sb, &out_shape);
            for_each2(&out_shape, &stra, &strb, |o, ia, ib| out[o] = f(av[ia], bv[ib]));
            out
        };
        Ok(self.push(Tensor::from_parts(out_shape, out), op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    // ---- elementwise unary ----------------------------------------------

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(T) -> T) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), op)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let ct = T::of(c);
        self.unary(x, Op::Scale(x, c), |v| v * ct)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let ct = T::of(c);
        self.unary(x, Op::AddScalar(x), |v| v + ct)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::of(slope);
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v > T::zero() { v } else { v * s })
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), |v| v.sqrt())
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    // ---- linear algebra and layout ---------------------------------------

    /// `[.., m, k] × [k, n]` (shared right operand) or batched
    /// `[B.., m, k] × [B.., k, n]` with identical batch dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(self.err("matmul", format!("operands must be ≥2-d, got {sa:?} × {sb:?}")));
        }
        let k = sa[sa.len() - 1];
        if sb[sb.len() - 2] != k {
            return Err(self.err(
                "matmul",
                format!("inner dims {k} vs {} ({sa:?} × {sb:?})", sb[sb.len() - 2]),
            ));
        }
        let n = sb[sb.len() - 1];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let out = if sb.len() == 2 {
            let m = av.len() / k;
            let mut out = vec![T::zero(); m * n];
            T::gemm(m, k, n, av, false, bv, false, &mut out, false);
            out
        } else {
            if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(self.err("matmul", format!("batch dims differ: {sa:?} × {sb:?}")));
            }
            let m = sa[sa.len() - 2];
            let batch: usize = sa[..sa.len() - 2].iter().product();
            let mut out = vec![T::zero(); batch * m * n];
            for bi in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &av[bi * m * k..(bi + 1) * m * k],
                    false,
                    &bv[bi * k * n..(bi + 1) * k * n],
                    false,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    false,
                );
            }
            out
        };
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::MatMul(a, b)))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(self.err("transpose", format!("need ≥2-d, got {s:?}")));
        }
        let (out, shape) = transpose_last2(self.value(x).data(), &s);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Transpose(x)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(self.err("permute", format!("{perm:?} is not a permutation of {s:?}")));
        }
        let (out, shape) = permute_data(self.value(x).data(), &s, perm);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Permute(x, perm.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self
            .value(x)
            .reshape(shape)
            .map_err(|_| self.err("reshape", format!("{:?} -> {shape:?}", self.shape(x))))?;
        Ok(self.push(t.with_requires_grad(false), Op::Reshape(x)))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| self.err("concat", "no operands".into()))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(self.err("concat", format!("axis {axis} out of range for {s0:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == s0.len()
                && s.iter().zip(&s0).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(self.err("concat", format!("{s:?} incompatible with {s0:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis] * inner;
                out.extend_from_slice(&self.value(x).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat(xs.to_vec(), axis)))
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(self.err("narrow", format!("axis {axis} range {start}+{len} outside {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Narrow(x, axis, start)))
    }

    /// Gathers the given flat indices into a 1-d tensor.
    pub fn select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        if indices.is_empty() || indices.iter().any(|&i| i >= n) {
            return Err(self.err("select", format!("{} indices invalid for {n} elements", indices.len())));
        }
        let src = self.value(x).data();
        let out = indices.iter().map(|&i| src[i]).collect();
        Ok(self.push(Tensor::from_parts(vec![indices.len()], out), Op::Select(x, indices.to_vec())))
    }

    /// Gathers the entries where `mask` is true.
    pub fn masked_select(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(self.err(
                "masked_select",
                format!("mask of {} for {:?}", mask.len(), self.shape(x)),
            ));
        }
        let idx: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        self.select(x, &idx)
    }

    // ---- softmax and reductions ------------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(self.err("softmax", format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for l in 0..len {
                    let v = src[base + l * inner];
                    if v > mx {
                        mx = v;
                    }
                }
                let mut sum = T::zero();
                for l in 0..len {
                    let e = (src[base + l * inner] - mx).exp();
                    out[base + l * inner] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[base + l * inner] /= sum;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(s, out), Op::Softmax(x, axis)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(v), Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = T::of(t.numel() as f64);
        let v: T = t.data().iter().copied().sum::<T>() / n;
        self.push(Tensor::scalar(v), Op::MeanAll(x))
    }

    /// Sum along `axis`, keeping it as a size-1 dimension.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, out) = self.reduce_axis("sum_axis", x, axis)?;
        Ok(self.push(Tensor::from_parts(shape, out), Op::SumAxis(x, axis)))
    }

    /// Mean along `axis`, keeping it as a size-1 dimension.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, mut out) = self.reduce_axis("mean_axis", x, axis)?;
        let n = T::of(self.shape(x)[axis] as f64);
        out.iter_mut().for_each(|v| *v /= n);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MeanAxis(x, axis)))
    }

    fn reduce_axis(&self, name: &str, x: Var, axis: usize) -> Result<(Vec<usize>, Vec<T>)> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(self.err(name, format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut shape = s;
        shape[axis] = 1;
        Ok((shape, out))
    }

    // ---- backward ------------------------------------------------------------

    /// Exact gradients of the scalar `loss` with respect to every leaf that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<LeafGrads<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<GradBuf<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut leaves = BTreeMap::new();
        if self.nodes[loss.0].needs_grad || matches!(self.nodes[loss.0].op, Op::Leaf) {
            grads[loss.0] = Some(GradBuf::new(vec![T::one()]));
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Op::Leaf = node.op {
                if node.needs_grad {
                    leaves.insert(id, Tensor::from_parts(node.value.shape().to_vec(), g.0.clone()));
                }
                continue;
            }
            if !node.needs_grad {
                continue;
            }
            self.backprop(id, &g.0, &mut grads);
        }
        Ok(LeafGrads { leaves })
    }

    /// Gradients keyed by parameter path for every trainable parameter the
    /// loss reached.
    pub fn param_grads(&self, leaf: &LeafGrads<T>) -> Gradients<T> {
        self.bound
            .iter()
            .filter_map(|(path, v)| leaf.get(*v).map(|g| (path.clone(), g.clone())))
            .collect()
    }

    fn backprop(&self, id: usize, g: &[T], grads: &mut [Option<GradBuf<T>>]) {
        let node = &self.nodes[id];
        let out_shape = node.value.shape();
        let y = node.value.data();
        let want = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, contrib: Vec<T>| accumulate(grads, v, contrib);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let negate = matches!(node.op, Op::Sub(..));
                if want(*a) {
                    acc(*a, reduce_to(g, out_shape, self.shape(*a)));
                }
                if want(*b) {
                    let mut gb = reduce_to(g, out_shape, self.shape(*b));
                    if negate {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    acc(*b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if want(*a) {
                    acc(*a, bcast_grad(g, out_shape, av.shape(), bv, |gv, other| gv * other));
                }
                if want(*b) {
                    acc(*b, bcast_grad(g, out_shape, bv.shape(), av, |gv, other| gv * other));
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if want(*a) {
                    acc(*a, bcast_grad(g, out_shape, av.shape(), bv, |gv, other| gv / other));
                }
                if want(*b) {
                    // d(a/b)/db = -(a/b)/b = -y/b
                    let gy: Vec<T> = g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect();
                    let mut gb = bcast_grad(&gy, out_shape, bv.shape(), bv, |v, bval| v / bval);
                    gb.iter_mut().for_each(|v| *v = -*v);
                    acc(*b, gb);
                }
            }
            Op::Scale(x, c) => {
                let c = T::of(*c);
                acc(*x, g.iter().map(|&v| v * c).collect());
            }
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Exp(x) => acc(*x, g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect()),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                        .collect(),
                );
            }
            Op::LeakyRelu(x, s) => {
                let s = T::of(*s);
                let xv = self.value(*x).data();
                acc(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&gv, &v)| if v > T::zero() { gv } else { gv * s })
                        .collect(),
                );
            }
            Op::Sqrt(x) => {
                let two = T::of(2.0);
                acc(*x, g.iter().zip(y).map(|(&gv, &yv)| gv / (two * yv)).collect());
            }
            Op::MatMul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (sa, sb) = (at.shape(), bt.shape());
                let k = sa[sa.len() - 1];
                let n = sb[sb.len() - 1];
                if sb.len() == 2 {
                    let m = at.numel() / k;
                    if want(*a) {
                        let mut ga = vec![T::zero(); m * k];
                        T::gemm(m, n, k, g, false, bt.data(), true, &mut ga, false);
                        acc(*a, ga);
                    }
                    if want(*b) {
                        let mut gb = vec![T::zero(); k * n];
                        T::gemm(k, m, n, at.data(), true, g, false, &mut gb, false);
                        acc(*b, gb);
                    }
                } else {
                    let m = sa[sa.len() - 2];
                    let batch: usize = sa[..sa.len() - 2].iter().product();
                    if want(*a) {
                        let mut ga = vec![T::zero(); batch * m * k];
                        for bi in 0..batch {
                            T::gemm(
                                m,
                                n,
                                k,
                                &g[bi * m * n..(bi + 1) * m * n],
                                false,
                                &bt.data()[bi * k * n..(bi + 1) * k * n],
                                true,
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                                false,
                            );
                        }
                        acc(*a, ga);
                    }
                    if want(*b) {
                        let mut gb = vec![T::zero(); batch * k * n];
                        for bi in 0..batch {
                            T::gemm(
                                k,
                                m,
                                n,
                                &at.data()[bi * m * k..(bi + 1) * m * k],
                                true,
                                &g[bi * m * n..(bi + 1) * m * n],
                                false,
                                &mut gb[bi * k * n..(bi + 1) * k * n],
                                false,
                            );
                        }
                        acc(*b, gb);
                    }
                }
            }
            Op::Transpose(x) => {
                let (gx, _) = transpose_last2(g, out_shape);
                acc(*x, gx);
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (d, &p) in perm.iter().enumerate() {
                    inv[p] = d;
                }
                let (gx, _) = permute_data(g, out_shape, &inv);
                acc(*x, gx);
            }
            Op::Softmax(x, axis) => {
                let (outer, len, inner) = split_axis(out_shape, *axis);
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for l in 0..len {
                            dot += y[base + l * inner] * g[base + l * inner];
                        }
                        for l in 0..len {
                            let p = base + l * inner;
                            gx[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::SumAll(x) => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::MeanAll(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0] / T::of(n as f64); n]);
            }
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                let s = self.shape(*x);
                let (outer, len, inner) = split_axis(s, *axis);
                let scale = if matches!(node.op, Op::MeanAxis(..)) {
                    T::one() / T::of(len as f64)
                } else {
                    T::one()
                };
                let mut gx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let row = &g[o * inner..(o + 1) * inner];
                    for _ in 0..len {
                        gx.extend(row.iter().map(|&v| v * scale));
                    }
                }
                acc(*x, gx);
            }
            Op::Select(x, idx) => {
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for (&i, &gv) in idx.iter().zip(g) {
                    gx[i] += gv;
                }
                acc(*x, gx);
            }
            Op::Concat(xs, axis) => {
                let (outer, _, inner) = split_axis(out_shape, *axis);
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis] * inner;
                    if want(x) {
                        let mut gx = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            let base = o * total + offset;
                            gx.extend_from_slice(&g[base..base + len]);
                        }
                        acc(x, gx);
                    }
                    offset += len;
                }
            }
            Op::Narrow(x, axis, start) => {
                let s = self.shape(*x);
                let (outer, full, inner) = split_axis(s, *axis);
                let len = out_shape[*axis];
                let mut gx = vec![T::zero(); outer * full * inner];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, gx);
            }
        }
    }
}

/// Gradients of the leaves reached by a backward pass.
pub struct LeafGrads<T> {
    leaves: BTreeMap<usize, Tensor<T>>,
}

impl<T: Real> LeafGrads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }
}

fn parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => vec![*a, *b],
        Op::Scale(x, _)
        | Op::AddScalar(x)
        | Op::Transpose(x)
        | Op::Permute(x, _)
        | Op::Reshape(x)
        | Op::Softmax(x, _)
        | Op::Exp(x)
        | Op::Relu(x)
        | Op::LeakyRelu(x, _)
        | Op::Sqrt(x)
        | Op::SumAll(x)
        | Op::MeanAll(x)
        | Op::SumAxis(x, _)
        | Op::MeanAxis(x, _)
        | Op::Select(x, _)
        | Op::Narrow(x, _, _) => vec![*x],
        Op::Concat(xs, _) => xs.clone(),
    }
}

fn accumulate<T: Real>(grads: &mut [Option<GradBuf<T>>], v: Var, contrib: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.0.iter_mut().zip(contrib) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(GradBuf::new(contrib)),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Element count of `shape` when, ignoring leading 1s, it equals the
/// trailing dimensions of `out`, so broadcasting repeats it contiguously.
fn suffix_numel(shape: &[usize], out: &[usize]) -> Option<usize> {
    let lead = shape.iter().take_while(|&&d| d == 1).count();
    let core = &shape[lead..];
    if core.len() > out.len() || core != &out[out.len() - core.len()..] {
        return None;
    }
    Some(core.iter().product::<usize>().max(1))
}

fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let off = nd - shape.len();
    let mut strides = vec![0; nd];
    let mut s = 1;
    for d in (0..shape.len()).rev() {
        strides[off + d] = if shape[d] == 1 { 0 } else { s };
        s *= shape[d];
    }
    strides
}

/// Visits every output index with the matching offsets into two broadcast
/// operands described by `sa`/`sb` strides.
fn for_each2(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let nd = out.len();
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[nd - 1];
    let (ia, ib) = (sa[nd - 1], sb[nd - 1]);
    let outer: usize = out[..nd - 1].iter().product();
    let mut idx = vec![0; nd - 1];
    let (mut oa, mut ob, mut o) = (0, 0, 0);
    for _ in 0..outer {
        let (mut pa, mut pb) = (oa, ob);
        for _ in 0..inner {
            f(o, pa, pb);
            o += 1;
            pa += ia;
            pb += ib;
        }
        let mut d = nd - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sums a gradient of `out_shape` down to a broadcast operand's shape.
fn reduce_to<T: Real>(g: &[T], out_shape: &[usize], target: &[usize]) -> Vec<T> {
    if out_shape == target {
        return g.to_vec();
    }
    let n: usize = target.iter().product();
    let mut acc = vec![T::zero(); n];
    if let Some(nt) = suffix_numel(target, out_shape) {
        for c in g.chunks_exact(nt) {
            acc.iter_mut().zip(c).for_each(|(a, &v)| *a += v);
        }
        return acc;
    }
    let st = bcast_strides(target, out_shape);
    let zero = vec![0; out_shape.len()];
    for_each2(out_shape, &st, &zero, |o, it, _| acc[it] += g[o]);
    acc
}

/// Gradient for one operand of a broadcast binary op: combines the output
/// gradient with the other operand's value, then reduces to `target`.
fn bcast_grad<T: Real>(
    g: &[T],
    out_shape: &[usize],
    target: &[usize],
    other: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let ov = other.data();
    if out_shape == target && other.shape() == out_shape {
        return g.iter().zip(ov).map(|(&gv, &o)| f(gv, o)).collect();
    }
    if target == out_shape {
        if let Some(no) = suffix_numel(other.shape(), out_shape) {
            return g
                .chunks_exact(no)
                .flat_map(|c| c.iter().zip(ov).map(|(&gv, &o)| f(gv, o)))
                .collect();
        }
    }
    let n: usize = target.iter().product();
    let mut acc = vec![T::zero(); n];
    if let (true, Some(nt)) = (other.shape() == out_shape, suffix_numel(target, out_shape)) {
        for (gc, oc) in g.chunks_exact(nt).zip(ov.chunks_exact(nt)) {
            for ((a, &gv), &o) in acc.iter_mut().zip(gc).zip(oc) {
                *a += f(gv, o);
            }
        }
        return acc;
    }
    let st = bcast_strides(target, out_shape);
    let so = bcast_strides(other.shape(), out_shape);
    for_each2(out_shape, &st, &so, |o, it, io| acc[it] += f(g[o], ov[io]));
    acc
}

fn transpose_last2<T: Real>(src: &[T], shape: &[usize]) -> (Vec<T>, Vec<usize>) {
    let nd = shape.len();
    let (r, c) = (shape[nd - 2], shape[nd - 1]);
    let batch = src.len() / (r * c);
    let mut out = vec![T::zero(); src.len()];
    for b in 0..batch {
        let base = b * r * c;
        for i in 0..r {
            for j in 0..c {
                out[base + j * r + i] = src[base + i * c + j];
            }
        }
    }
    let mut s = shape.to_vec();
    s.swap(nd - 2, nd - 1);
    (out, s)
}

fn permute_data<T: Real>(src: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let nd = shape.len();
    let mut in_strides = vec![1; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let zero = vec![0; nd];
    for_each2(&out_shape, &strides, &zero, |_, i, _| out.push(src[i]));
    (out, out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
            .with_requires_grad(true)
    }

    /// Central-difference check of `build` (which maps inputs to a scalar)
    /// against the tape's gradients.
    fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss).unwrap();
        let eps = 1e-6;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).unwrap();
            for i in 0..t.numel() {
                let eval = |delta: f64| {
                    let mut probe = inputs.clone();
                    probe[k].data_mut()[i] += delta;
                    let mut g = Graph::new();
                    let vs: Vec<Var> = probe.into_iter().map(|t| g.input(t)).collect();
                    let l = build(&mut g, &vs);
                    g.value(l).item()
                };
                let num = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let an = analytic.data()[i];
                assert!(
                    (num - an).abs() <= 1e-6 * (1.0 + an.abs()),
                    "input {k} entry {i}: analytic {an} numeric {num}"
                );
            }
        }
    }

    #[test]
    fn sum_of_param_has_unit_gradient() {
        let p = Tensor::<f64>::zeros(&[2, 2]).with_requires_grad(true);
        let mut g = Graph::new();
        let v = g.input(p);
        let l = g.sum(v);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(v).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn square_sum_gradient_is_twice_input() {
        let p = Tensor::<f64>::from_f64(&[2], &[1.0, 2.0]).unwrap().with_requires_grad(true);
        let mut g = Graph::new();
        let v = g.input(p);
        let sq = g.mul(v, v).unwrap();
        let l = g.sum(sq);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(v).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let v = g.input(Tensor::zeros(&[3]).with_requires_grad(true));
        assert!(matches!(g.backward(v), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_carry_scope_path() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g
            .scoped("encoder", |g| g.scoped("block0", |g| g.matmul(a, b)))
            .unwrap_err();
        assert!(err.to_string().starts_with("encoder/block0/matmul"), "{err}");
        let c = g.constant(Tensor::zeros(&[4]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[4]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[5, 3, 1], &[5, 1, 3]), Some(vec![5, 3, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[3, 2]), None);
    }

    #[test]
    fn elementwise_gradients_with_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&[2, 3, 4], &mut rng);
        let b = rand_tensor(&[3, 1], &mut rng);
        let w = rand_tensor(&[2, 3, 4], &mut rng);
        check(vec![a, b, w], |g, v| {
            let s = g.add(v[0], v[1]).unwrap();
            let d = g.sub(s, v[1]).unwrap();
            let m = g.mul(d, v[1]).unwrap();
            let q = g.div(m, v[2]).unwrap();
            let l = g.leaky_relu(q, 0.2);
            let e = g.exp(l);
            let r = g.relu(e);
            let w = g.mul(r, v[2]).unwrap();
            g.mean(w)
        });
    }

    #[test]
    fn matmul_gradients_shared_and_batched() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&[2, 3, 4], &mut rng);
        let w = rand_tensor(&[4, 5], &mut rng);
        let b = rand_tensor(&[2, 5, 3], &mut rng);
        check(vec![a, w, b], |g, v| {
            let h = g.matmul(v[0], v[1]).unwrap();
            let o = g.matmul(h, v[2]).unwrap();
            let t = g.transpose(o).unwrap();
            let sq = g.square(t).unwrap();
            g.sum(sq)
        });
    }

    #[test]
    fn large_matmul_uses_blocked_kernel_consistently() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&[40, 30], &mut rng);
        let b = rand_tensor(&[30, 20], &mut rng);
        let mut naive = vec![0.0; 40 * 20];
        naive_reference(a.data(), b.data(), &mut naive, 40, 30, 20);
        let mut g = Graph::new();
        let (va, vb) = (g.input(a), g.input(b));
        let c = g.matmul(va, vb).unwrap();
        for (x, y) in g.value(c).data().iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn naive_reference(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
    }

    #[test]
    fn layout_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_tensor(&[2, 3, 4], &mut rng);
        let b = rand_tensor(&[2, 2, 4], &mut rng);
        let w = rand_tensor(&[4, 3, 2], &mut rng);
        check(vec![a, b, w], |g, v| {
            let c = g.concat(&[v[0], v[1]], 1).unwrap();
            let n = g.narrow(c, 1, 1, 3).unwrap();
            let p = g.permute(n, &[2, 1, 0]).unwrap();
            let m = g.mul(p, v[2]).unwrap();
            let r = g.reshape(m, &[6, 4]).unwrap();
            let s = g.select(r, &[0, 5, 5, 23, 11]).unwrap();
            let sq = g.square(s).unwrap();
            g.sum(sq)
        });
    }

    #[test]
    fn softmax_and_reduction_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_tensor(&[3, 4, 2], &mut rng);
        let w = rand_tensor(&[3, 4, 2], &mut rng);
        check(vec![a, w], |g, v| {
            let s1 = g.softmax(v[0], 1).unwrap();
            let s2 = g.softmax(v[0], 2).unwrap();
            let m = g.mul(s1, v[1]).unwrap();
            let m2 = g.mul(s2, m).unwrap();
            let r = g.sum_axis(m2, 0).unwrap();
            let q = g.mean_axis(r, 1).unwrap();
            let sq = g.square(q).unwrap();
            let pos = g.add_scalar(sq, 1.0);
            let sr = g.sqrt(pos);
            let sc = g.scale(sr, 3.0);
            g.sum(sc)
        });
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::new();
        let x = g.input(rand_tensor(&[5, 7], &mut rng));
        let s = g.softmax(x, 1).unwrap();
        for row in g.value(s).data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::from_f64(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.5, 9.0]).unwrap());
        let s = g.softmax(x, 1).unwrap();
        for row in g.value(s).data().chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn masked_softmax_gives_exact_zeros_and_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64(&[1, 3], &[0.3, 0.1, 2.0]).unwrap().with_requires_grad(true));
        let m = g.constant(Tensor::from_f64(&[1, 3], &[0.0, 0.0, f64::NEG_INFINITY]).unwrap());
        let xm = g.add(x, m).unwrap();
        let s = g.softmax(xm, 1).unwrap();
        assert_eq!(g.value(s).data()[2], 0.0);
        let w = g.constant(Tensor::from_f64(&[1, 3], &[1.0, 2.0, 3.0]).unwrap());
        let p = g.mul(s, w).unwrap();
        let l = g.sum(p);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data()[2], 0.0);
    }

    #[test]
    fn constants_and_frozen_params_get_no_gradient() {
        let mut store = ParamStore::<f64>::new(0);
        store.insert("enc.w", Tensor::full(&[2], 1.0));
        store.insert("head.w", Tensor::full(&[2], 2.0));
        let mut g = Graph::with_params(&store).freeze("enc.");
        let a = g.param("enc.w").unwrap();
        let b = g.param("head.w").unwrap();
        let p = g.mul(a, b).unwrap();
        let l = g.sum(p);
        let leaf = g.backward(l).unwrap();
        let grads = g.param_grads(&leaf);
        assert!(!grads.contains_key("enc.w"));
        assert_eq!(grads["head.w"].data(), &[1.0, 1.0]);
        assert!(g.param("missing").is_err());
    }
}
