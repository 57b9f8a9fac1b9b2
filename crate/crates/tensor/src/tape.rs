//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive application in creation order, which
//! is already a topological order. [`Tape::backward`] walks the nodes once in
//! reverse, accumulating vector-Jacobian products.
//!
//! Leaves are registered by name. A leaf passed through
//! [`Tape::stop_grad`] still gets a gradient entry, but nothing flows back
//! through the marker, so a frozen parameter reports an exact zero.

use std::collections::{BTreeMap, BTreeSet};

use statrs::function::erf::erf;

use crate::error::{Result, TensorError};
use crate::tensor::{argsort, broadcast_map, broadcast_shape, split_axis, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    StopGrad,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SumAxis(Var, usize),
    SumAll(Var),
    Square(Var),
    Sqrt(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    ClampMin(Var, f64),
    Arccos(Var),
    Sigmoid(Var),
    Gelu(Var),
    GeluDeriv(Var),
    MaxAxis(Var, Vec<usize>),
    LogSumExp(Var, f64),
    Softmax(Var, f64),
    LogSoftmax(Var, f64),
    IndexSelect(Var, usize, Vec<usize>),
    Take(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Slack allowed outside [-1, 1] before `arccos` reports a domain error.
pub const ARCCOS_SLACK: f64 = 1e-12;

/// Scalar loss value with gradients for every registered leaf.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DualValue {
    pub value: f64,
    pub grads: BTreeMap<String, Tensor>,
    pub flags: BTreeSet<String>,
}

impl DualValue {
    pub fn constant(value: f64) -> Self {
        Self {
            value,
            ..Default::default()
        }
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn has_flag(&self, flag: &str) -> bool {
        self.flags.contains(flag)
    }

    pub fn with_flag(mut self, flag: impl Into<String>) -> Self {
        self.flags.insert(flag.into());
        self
    }

    /// `a * self + b * other`, merging gradients by leaf name.
    pub fn combine(&self, a: f64, other: &DualValue, b: f64) -> Result<DualValue> {
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, g) in &self.grads {
            grads.insert(name.clone(), g.map(|x| a * x));
        }
        for (name, g) in &other.grads {
            match grads.get_mut(name) {
                Some(acc) => {
                    *acc = acc.zip_map(g, |x, y| x + b * y)?;
                }
                None => {
                    grads.insert(name.clone(), g.map(|y| b * y));
                }
            }
        }
        let mut flags = self.flags.clone();
        flags.extend(other.flags.iter().cloned());
        Ok(DualValue {
            value: a * self.value + b * other.value,
            grads,
            flags,
        })
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of the right shape if nothing reached it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<(String, Var)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drop every node and leaf so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.leaves.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    /// Register a differentiable leaf under `name`.
    pub fn leaf(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.leaves.push((name.into(), v));
        v
    }

    pub fn leaves(&self) -> &[(String, Var)] {
        &self.leaves
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Identity in the forward pass; blocks all gradient flow backward.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGrad)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let value = if sa == sb {
            self.value(a).zip_map(self.value(b), f)?
        } else {
            let out = broadcast_shape(name, &sa, &sb)?;
            let ma = broadcast_map(&sa, &out);
            let mb = broadcast_map(&sb, &out);
            let (da, db) = (self.value(a).data(), self.value(b).data());
            let data = ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect();
            Tensor::new(out, data)?
        };
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    /// `max(x, floor)` element-wise; the gradient passes where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, |v| v.max(floor), Op::ClampMin(x, floor))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    /// Derivative of GELU, itself differentiable.
    pub fn gelu_deriv(&mut self, x: Var) -> Var {
        self.unary(x, gelu_deriv, Op::GeluDeriv(x))
    }

    /// `arccos`, clamping inputs within [`ARCCOS_SLACK`] of [-1, 1].
    ///
    /// The derivative at a clamped endpoint is taken as zero.
    pub fn arccos(&mut self, x: Var) -> Result<Var> {
        if let Some(&bad) = self
            .value(x)
            .data()
            .iter()
            .find(|v| !(v.abs() <= 1.0 + ARCCOS_SLACK))
        {
            return Err(TensorError::Domain {
                op: "arccos",
                value: bad,
            });
        }
        Ok(self.unary(x, |v| v.clamp(-1.0, 1.0).acos(), Op::Arccos(x)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        Ok(self.push(value, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(TensorError::InvalidAxis {
                op,
                axis,
                shape: self.shape(x).to_vec(),
            });
        }
        Ok(())
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += data[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::SumAxis(x, axis)))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", x, axis)?;
        let n = self.shape(x)[axis];
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Maximum over `axis`; the gradient is routed to the first maximiser.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("max_axis", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "max_axis",
                msg: "empty axis".into(),
            });
        }
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * n * inner + i;
                for k in 1..n {
                    let idx = (o * n + k) * inner + i;
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                arg.push(best);
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::MaxAxis(x, arg)))
    }

    fn last_axis(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        let shape = self.shape(x);
        match shape.last() {
            Some(&n) if n > 0 => Ok((self.value(x).numel() / n, n)),
            _ => Err(TensorError::Invalid {
                op,
                msg: format!("needs a non-empty last axis, got shape {shape:?}"),
            }),
        }
    }

    /// `tau * log(sum(exp(x / tau)))` over the last axis.
    pub fn logsumexp(&mut self, x: Var, tau: f64) -> Result<Var> {
        let (rows, n) = self.last_axis("logsumexp", x)?;
        let data = self.value(x).data();
        let out: Vec<f64> = (0..rows)
            .map(|r| tau * lse(&data[r * n..(r + 1) * n], tau))
            .collect();
        let mut shape = self.shape(x).to_vec();
        shape.pop();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::LogSumExp(x, tau)))
    }

    /// `softmax(x / tau)` over the last axis.
    pub fn softmax(&mut self, x: Var, tau: f64) -> Result<Var> {
        let value = softmax_rows(self.value(x), tau, "softmax")?;
        Ok(self.push(value, Op::Softmax(x, tau)))
    }

    /// `log softmax(x / tau)` over the last axis.
    pub fn log_softmax(&mut self, x: Var, tau: f64) -> Result<Var> {
        let (rows, n) = self.last_axis("log_softmax", x)?;
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(rows * n);
        for r in 0..rows {
            let row = &data[r * n..(r + 1) * n];
            let (m, tail) = lse_parts(row, tau);
            out.extend(row.iter().map(|v| (v / tau - m) - tail));
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(value, Op::LogSoftmax(x, tau)))
    }

    /// Select entries `idx` along `axis` (gather / mask-select).
    pub fn index_select(&mut self, x: Var, axis: usize, idx: &[usize]) -> Result<Var> {
        self.check_axis("index_select", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(TensorError::IndexOutOfBounds {
                op: "index_select",
                index: bad,
                extent: n,
            });
        }
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * idx.len() * inner);
        for o in 0..outer {
            for &k in idx {
                let base = (o * n + k) * inner;
                out.extend_from_slice(&data[base..base + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = idx.len();
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::IndexSelect(x, axis, idx.to_vec())))
    }

    /// Rows of `x` (along axis 0) where `mask` is true.
    pub fn mask_select(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let idx: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect();
        self.index_select(x, 0, &idx)
    }

    /// One-dimensional gather of flat entries.
    pub fn take(&mut self, x: Var, flat: &[usize]) -> Result<Var> {
        let numel = self.value(x).numel();
        if let Some(&bad) = flat.iter().find(|&&i| i >= numel) {
            return Err(TensorError::IndexOutOfBounds {
                op: "take",
                index: bad,
                extent: numel,
            });
        }
        let data = self.value(x).data();
        let value = Tensor::vector(flat.iter().map(|&i| data[i]).collect());
        Ok(self.push(value, Op::Take(x, flat.to_vec())))
    }

    /// Values sorted ascending along the last axis. Not differentiable: the
    /// result is a constant. Use [`Tape::sort_gather`] to keep gradients.
    pub fn sort_values(&mut self, x: Var) -> Result<Var> {
        let (rows, n) = self.last_axis("sort", x)?;
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(rows * n);
        for r in 0..rows {
            let row = &data[r * n..(r + 1) * n];
            out.extend(argsort(row).into_iter().map(|i| row[i]));
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.constant(value))
    }

    /// Sort along the last axis by gathering through the argsort
    /// permutation, so gradients flow to the gathered entries.
    pub fn sort_gather(&mut self, x: Var) -> Result<Var> {
        let (rows, n) = self.last_axis("sort", x)?;
        let data = self.value(x).data();
        let mut flat = Vec::with_capacity(rows * n);
        for r in 0..rows {
            flat.extend(argsort(&data[r * n..(r + 1) * n]).into_iter().map(|i| r * n + i));
        }
        let shape = self.shape(x).to_vec();
        let g = self.take(x, &flat)?;
        self.reshape(g, &shape)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = match parts.first() {
            Some(&p) => self.shape(p).to_vec(),
            None => {
                return Err(TensorError::Invalid {
                    op: "concat",
                    msg: "no inputs".into(),
                })
            }
        };
        if axis >= first.len() {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                shape: first,
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis)))
    }

    // ---- composites -------------------------------------------------------

    /// Inner product along `axis`.
    pub fn inner(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum_axis(p, axis)
    }

    /// Euclidean norm along `axis`.
    pub fn l2_norm(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sq = self.inner(x, x, axis)?;
        Ok(self.sqrt(sq))
    }

    /// Cosine similarity along `axis`: `<a,b> / (sqrt(<a,a>) * sqrt(<b,b>))`.
    pub fn cosine(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let ab = self.inner(a, b, axis)?;
        let na = self.l2_norm(a, axis)?;
        let nb = self.l2_norm(b, axis)?;
        let den = self.mul(na, nb)?;
        self.div(ab, den)
    }

    /// Rows of a `[N, D]` matrix scaled to unit norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let n = self.l2_norm(x, 1)?;
        let rows = self.shape(n)[0];
        let n = self.reshape(n, &[rows, 1])?;
        self.div(x, n)
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(TensorError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(root_value.shape(), 1.0));
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Backward pass collected into a [`DualValue`] over registered leaves.
    pub fn dual(&self, root: Var) -> Result<DualValue> {
        let value = self.scalar_value(root)?;
        let g = self.backward(root)?;
        let grads = self
            .leaves
            .iter()
            .map(|(name, v)| (name.clone(), g.wrt(*v)))
            .collect();
        Ok(DualValue {
            value,
            grads,
            flags: BTreeSet::new(),
        })
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant | Op::StopGrad => {}
            Op::Add(a, b) => {
                self.accum_broadcast(*a, g.clone(), grads)?;
                self.accum_broadcast(*b, g.clone(), grads)?;
            }
            Op::Sub(a, b) => {
                self.accum_broadcast(*a, g.clone(), grads)?;
                self.accum_broadcast(*b, g.map(|x| -x), grads)?;
            }
            Op::Mul(a, b) => {
                let gb = self.expand(*b, out.shape());
                let ga = self.expand(*a, out.shape());
                let da = zip(g, &gb, |g, y| g * y);
                let db = zip(g, &ga, |g, x| g * x);
                self.accum_broadcast(*a, da, grads)?;
                self.accum_broadcast(*b, db, grads)?;
            }
            Op::Div(a, b) => {
                let xa = self.expand(*a, out.shape());
                let xb = self.expand(*b, out.shape());
                let da = zip(g, &xb, |g, y| g / y);
                let db = Tensor::from_fn(out.shape(), |i| {
                    -g.data()[i] * xa.data()[i] / (xb.data()[i] * xb.data()[i])
                });
                self.accum_broadcast(*a, da, grads)?;
                self.accum_broadcast(*b, db, grads)?;
            }
            Op::Neg(x) => accum(grads, *x, g.map(|v| -v)),
            Op::Scale(x, c) => {
                let c = *c;
                accum(grads, *x, g.map(|v| v * c))
            }
            Op::AddScalar(x) => accum(grads, *x, g.clone()),
            Op::MatMul(a, b) => {
                let bt = self.value(*b).transpose()?;
                let at = self.value(*a).transpose()?;
                accum(grads, *a, g.matmul(&bt)?);
                accum(grads, *b, at.matmul(g)?);
            }
            Op::Transpose(x) => accum(grads, *x, g.transpose()?),
            Op::Reshape(x) => accum(grads, *x, g.reshape(self.shape(*x))?),
            Op::SumAxis(x, axis) => {
                let shape = self.shape(*x);
                let (outer, n, inner) = split_axis(shape, *axis);
                let gd = g.data();
                let d = Tensor::from_fn(shape, |flat| {
                    let o = flat / (n * inner);
                    let i = flat % inner;
                    gd[o * inner + i]
                });
                debug_assert_eq!(d.numel(), outer * n * inner);
                accum(grads, *x, d);
            }
            Op::SumAll(x) => {
                let gv = g.data()[0];
                accum(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                accum(grads, *x, zip(g, xv, |g, x| 2.0 * g * x));
            }
            Op::Sqrt(x) => accum(grads, *x, zip(g, out, |g, y| 0.5 * g / y)),
            Op::Exp(x) => accum(grads, *x, zip(g, out, |g, y| g * y)),
            Op::Log(x) => accum(grads, *x, zip(g, self.value(*x), |g, x| g / x)),
            Op::Abs(x) => accum(grads, *x, zip(g, self.value(*x), |g, x| g * sign(x))),
            Op::ClampMin(x, floor) => {
                let f = *floor;
                accum(
                    grads,
                    *x,
                    zip(g, self.value(*x), |g, x| if x > f { g } else { 0.0 }),
                )
            }
            Op::Arccos(x) => accum(
                grads,
                *x,
                zip(g, self.value(*x), |g, x| {
                    if x.abs() >= 1.0 {
                        0.0
                    } else {
                        -g / (1.0 - x * x).sqrt()
                    }
                }),
            ),
            Op::Sigmoid(x) => accum(grads, *x, zip(g, out, |g, s| g * s * (1.0 - s))),
            Op::Gelu(x) => accum(grads, *x, zip(g, self.value(*x), |g, x| g * gelu_deriv(x))),
            Op::GeluDeriv(x) => accum(
                grads,
                *x,
                zip(g, self.value(*x), |g, x| g * gelu_second_deriv(x)),
            ),
            Op::MaxAxis(x, arg) => {
                let mut d = Tensor::zeros(self.shape(*x));
                for (k, &src) in arg.iter().enumerate() {
                    d.data_mut()[src] += g.data()[k];
                }
                accum(grads, *x, d);
            }
            Op::LogSumExp(x, tau) => {
                let sm = softmax_rows(self.value(*x), *tau, "logsumexp")?;
                let n = *self.shape(*x).last().unwrap_or(&1);
                let gd = g.data();
                let d = Tensor::from_fn(sm.shape(), |i| gd[i / n] * sm.data()[i]);
                accum(grads, *x, d);
            }
            Op::Softmax(x, tau) => {
                let n = *out.shape().last().unwrap_or(&1);
                let (s, gd) = (out.data(), g.data());
                let mut d = vec![0.0; s.len()];
                for r in 0..s.len() / n {
                    let row = r * n..(r + 1) * n;
                    let dot: f64 = s[row.clone()].iter().zip(&gd[row.clone()]).map(|(a, b)| a * b).sum();
                    for i in row {
                        d[i] = s[i] * (gd[i] - dot) / tau;
                    }
                }
                accum(grads, *x, Tensor::new(out.shape().to_vec(), d)?);
            }
            Op::LogSoftmax(x, tau) => {
                let n = *out.shape().last().unwrap_or(&1);
                let (ls, gd) = (out.data(), g.data());
                let mut d = vec![0.0; ls.len()];
                for r in 0..ls.len() / n {
                    let row = r * n..(r + 1) * n;
                    let gsum: f64 = gd[row.clone()].iter().sum();
                    for i in row {
                        d[i] = (gd[i] - ls[i].exp() * gsum) / tau;
                    }
                }
                accum(grads, *x, Tensor::new(out.shape().to_vec(), d)?);
            }
            Op::IndexSelect(x, axis, idx) => {
                let shape = self.shape(*x);
                let (outer, n, inner) = split_axis(shape, *axis);
                let mut d = Tensor::zeros(shape);
                let gd = g.data();
                let dd = d.data_mut();
                for o in 0..outer {
                    for (j, &k) in idx.iter().enumerate() {
                        let src = (o * idx.len() + j) * inner;
                        let dst = (o * n + k) * inner;
                        for i in 0..inner {
                            dd[dst + i] += gd[src + i];
                        }
                    }
                }
                accum(grads, *x, d);
            }
            Op::Take(x, flat) => {
                let mut d = Tensor::zeros(self.shape(*x));
                for (j, &i) in flat.iter().enumerate() {
                    d.data_mut()[i] += g.data()[j];
                }
                accum(grads, *x, d);
            }
            Op::Concat(parts, axis) => {
                let total = out.shape()[*axis];
                let outer: usize = out.shape()[..*axis].iter().product();
                let inner: usize = out.shape()[axis + 1..].iter().product();
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[*axis];
                    let mut d = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&g.data()[start..start + n * inner]);
                    }
                    accum(grads, p, Tensor::new(self.shape(p).to_vec(), d)?);
                    offset += n;
                }
            }
        }
        Ok(())
    }

    /// Value of `v` broadcast to `shape`.
    fn expand(&self, v: Var, shape: &[usize]) -> Tensor {
        let val = self.value(v);
        if val.shape() == shape {
            return val.clone();
        }
        let map = broadcast_map(val.shape(), shape);
        let data = map.iter().map(|&i| val.data()[i]).collect();
        Tensor::new(shape.to_vec(), data).expect("broadcast map matches shape")
    }

    /// Reduce a gradient of broadcast shape back onto `v`'s shape.
    fn accum_broadcast(&self, v: Var, g: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let shape = self.shape(v);
        if shape == g.shape() {
            accum(grads, v, g);
            return Ok(());
        }
        let map = broadcast_map(shape, g.shape());
        let mut d = Tensor::zeros(shape);
        for (k, &i) in map.iter().enumerate() {
            d.data_mut()[i] += g.data()[k];
        }
        accum(grads, v, d);
        Ok(())
    }
}

fn accum(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    a.zip_map(b, f).expect("gradient shapes agree")
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * INV_SQRT_2))
}

pub fn gelu_deriv(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn gelu_second_deriv(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp() * (2.0 - x * x)
}

/// `log(sum(exp(row / tau)))` as `(max, log1p(rest))`, where `rest` sums the
/// shifted exponentials of every entry but the first maximiser.
fn lse_parts(row: &[f64], tau: f64) -> (f64, f64) {
    let (arg, m) = row
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(a, m), (i, &v)| if v / tau > m { (i, v / tau) } else { (a, m) });
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != arg)
        .map(|(_, &v)| (v / tau - m).exp())
        .sum();
    (m, rest.ln_1p())
}

/// `log(sum(exp(row / tau)))`, stabilised.
fn lse(row: &[f64], tau: f64) -> f64 {
    let (m, tail) = lse_parts(row, tau);
    m + tail
}

fn softmax_rows(x: &Tensor, tau: f64, op: &'static str) -> Result<Tensor> {
    let n = match x.shape().last() {
        Some(&n) if n > 0 => n,
        _ => {
            return Err(TensorError::Invalid {
                op,
                msg: format!("needs a non-empty last axis, got shape {:?}", x.shape()),
            })
        }
    };
    let d = x.data();
    let mut out = Vec::with_capacity(d.len());
    for r in 0..d.len() / n {
        let row = &d[r * n..(r + 1) * n];
        let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / tau));
        let e: Vec<f64> = row.iter().map(|&v| (v / tau - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Row-wise `softmax(x / tau)` of a plain tensor over its last axis.
pub fn softmax(x: &Tensor, tau: f64) -> Result<Tensor> {
    softmax_rows(x, tau, "softmax")
}
