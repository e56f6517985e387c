//! The computation tape.
//!
//! Every operation appends a node holding its output value and enough
//! information to route gradients back to its inputs. Nodes are only ever
//! appended, so creation order is already a topological order and
//! [`Graph::backward`] walks it in reverse.

use crate::error::{Result, TensorError};
use crate::tensor::{broadcast_index, broadcast_shapes, numel, split_at_axis, strides, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Minimum(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    BroadcastTo(Var),
    Concat(Vec<Var>, usize),
    SumAxis(Var, usize),
    SumAll(Var),
    MinAxis { x: Var, axis: usize, argmin: Vec<usize> },
    ClampMin(Var, f64),
    ClampMax(Var, f64),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax { x: Var, axis: usize, temperature: f64 },
    MaskedFill { x: Var, mask: Vec<bool> },
    Select { x: Var, axis: usize, indices: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of executed tensor operations.
///
/// A graph is used for one forward pass and one or more backward passes.
/// It is not shared between threads; independent passes use independent
/// graphs.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the leaves that require them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros of `shape` when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that gradients do not flow into.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is collected by [`Graph::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { op, axis, rank });
        }
        Ok(())
    }

    // ---- elementwise binary -------------------------------------------------

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Var, Var) -> Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shapes(sa, sb).ok_or_else(|| TensorError::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_index(sa, &out_shape);
            let mb = broadcast_index(sb, &out_shape);
            ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(out_shape, data), make(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Elementwise minimum. Ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, |x, y| if x <= y { x } else { y }, Op::Minimum)
    }

    // ---- elementwise unary --------------------------------------------------

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    /// `max(x, c)`. At `x == c` the gradient flows to `x`.
    pub fn clamp_min(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| if v >= c { v } else { c }, Op::ClampMin(x, c))
    }

    /// `min(x, c)`. At `x == c` the gradient flows to `x`.
    pub fn clamp_max(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| if v <= c { v } else { c }, Op::ClampMax(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.clamp_min(x, 0.0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    // ---- linear algebra -----------------------------------------------------

    /// Batched matrix product `[.., p, q] x [.., q, r] -> [.., p, r]` with
    /// broadcasting over the leading axes. A rank-2 right operand is shared
    /// by every leading index.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatMulPlan::new(self.shape(a), self.shape(b))?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; numel(&plan.out_shape)];
        plan.forward(da, db, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(plan.out_shape.clone(), out), Op::MatMul(a, b), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::invalid(
                "permute",
                format!("{perm:?} is not a permutation of the axes of {shape:?}"),
            ));
        }
        let map = permute_index(&shape, perm);
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let out_shape = perm.iter().map(|&p| shape[p]).collect::<Vec<_>>();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Permute(x, perm.to_vec()), rg))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a0: usize, a1: usize) -> Result<Var> {
        self.check_axis("transpose", x, a0)?;
        self.check_axis("transpose", x, a1)?;
        let mut perm: Vec<usize> = (0..self.shape(x).len()).collect();
        perm.swap(a0, a1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x);
        if broadcast_shapes(sx, shape).as_deref() != Some(shape) {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_to",
                lhs: sx.to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let map = broadcast_index(sx, shape);
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::BroadcastTo(x), rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                let chunk = len * inner;
                data.extend_from_slice(&self.value(x).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        let rg = self.rg(xs);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Concat(xs.to_vec(), axis), rg))
    }

    /// Gathers `indices` along `axis`.
    pub fn select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        self.check_axis("select", x, axis)?;
        let shape = self.shape(x).to_vec();
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[axis]) {
            return Err(TensorError::invalid(
                "select",
                format!("index {bad} out of range for axis {axis} of {shape:?}"),
            ));
        }
        let (outer, len, inner) = split_at_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &ix in indices {
                let start = (o * len + ix) * inner;
                data.extend_from_slice(&src[start..start + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Select {
                x,
                axis,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.check_axis("sum_axis", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_at_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let out_shape = reduced_shape(&shape, axis, keepdim);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::SumAxis(x, axis), rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let len = *self.shape(x).get(axis).ok_or(TensorError::AxisOutOfRange {
            op: "mean_axis",
            axis,
            rank: self.shape(x).len(),
        })?;
        let s = self.sum_axis(x, axis, keepdim)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(total), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Minimum along `axis`; ties resolve to the lowest index.
    pub fn min_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.check_axis("min_axis", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_at_axis(&shape, axis);
        if len == 0 {
            return Err(TensorError::invalid("min_axis", "empty axis"));
        }
        let src = self.value(x).data();
        let mut data = vec![f64::INFINITY; outer * inner];
        let mut argmin = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let v = src[(o * len + l) * inner + i];
                    let slot = o * inner + i;
                    if l == 0 || v < data[slot] {
                        data[slot] = v;
                        argmin[slot] = l;
                    }
                }
            }
        }
        let out_shape = reduced_shape(&shape, axis, keepdim);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::MinAxis { x, axis, argmin }, rg))
    }

    /// `softmax(x / temperature)` along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize, temperature: f64) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        if !(temperature > 0.0) {
            return Err(TensorError::invalid(
                "softmax",
                format!("temperature must be positive, got {temperature}"),
            ));
        }
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_at_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for l in 0..len {
                    max = max.max(src[at(l)] / temperature);
                }
                let mut total = 0.0;
                for l in 0..len {
                    let e = (src[at(l)] / temperature - max).exp();
                    data[at(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    data[at(l)] /= total;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Softmax { x, axis, temperature },
            rg,
        ))
    }

    /// Replaces entries where `mask` is nonzero by `value`. The mask must
    /// broadcast to the shape of `x`. Masked entries receive no gradient.
    pub fn masked_fill(&mut self, x: Var, mask: &Tensor, value: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if broadcast_shapes(mask.shape(), &shape).as_deref() != Some(&shape[..]) {
            return Err(TensorError::ShapeMismatch {
                op: "masked_fill",
                lhs: shape,
                rhs: mask.shape().to_vec(),
            });
        }
        let map = broadcast_index(mask.shape(), &shape);
        let mask: Vec<bool> = map.iter().map(|&i| mask.data()[i] != 0.0).collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::MaskedFill { x, mask }, rg))
    }

    // ---- reverse pass -------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every leaf created by
    /// [`Graph::param`]. The graph is not modified, so repeated calls return
    /// identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if numel(ls) != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                leaf_grads[idx] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_broadcast(*a, out_shape, grads, |o| g[o]);
                self.acc_broadcast(*b, out_shape, grads, |o| g[o]);
            }
            Op::Sub(a, b) => {
                self.acc_broadcast(*a, out_shape, grads, |o| g[o]);
                self.acc_broadcast(*b, out_shape, grads, |o| -g[o]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ma = broadcast_index(va.shape(), out_shape);
                let mb = broadcast_index(vb.shape(), out_shape);
                let (da, db) = (va.data(), vb.data());
                self.acc_broadcast(*a, out_shape, grads, |o| g[o] * db[mb[o]]);
                self.acc_broadcast(*b, out_shape, grads, |o| g[o] * da[ma[o]]);
            }
            Op::Minimum(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ma = broadcast_index(va.shape(), out_shape);
                let mb = broadcast_index(vb.shape(), out_shape);
                let (da, db) = (va.data(), vb.data());
                let first = |o: usize| da[ma[o]] <= db[mb[o]];
                self.acc_broadcast(*a, out_shape, grads, |o| if first(o) { g[o] } else { 0.0 });
                self.acc_broadcast(*b, out_shape, grads, |o| if first(o) { 0.0 } else { g[o] });
            }
            Op::Scale(x, c) => self.acc_same(*x, grads, |o| g[o] * c),
            Op::AddScalar(x) | Op::Reshape(x) => self.acc_same(*x, grads, |o| g[o]),
            Op::ClampMin(x, c) => {
                let d = self.value(*x).data();
                self.acc_same(*x, grads, |o| if d[o] >= *c { g[o] } else { 0.0 });
            }
            Op::ClampMax(x, c) => {
                let d = self.value(*x).data();
                self.acc_same(*x, grads, |o| if d[o] <= *c { g[o] } else { 0.0 });
            }
            Op::Exp(x) => self.acc_same(*x, grads, |o| g[o] * out[o]),
            Op::Log(x) => {
                let d = self.value(*x).data();
                self.acc_same(*x, grads, |o| g[o] / d[o]);
            }
            Op::Tanh(x) => self.acc_same(*x, grads, |o| g[o] * (1.0 - out[o] * out[o])),
            Op::Sigmoid(x) => self.acc_same(*x, grads, |o| g[o] * out[o] * (1.0 - out[o])),
            Op::MaskedFill { x, mask } => self.acc_same(*x, grads, |o| if mask[o] { 0.0 } else { g[o] }),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let plan = MatMulPlan::new(va.shape(), vb.shape()).expect("validated in forward");
                if self.requires_grad(*a) {
                    let ga = slot(grads, *a, va.numel());
                    plan.grad_lhs(g, vb.data(), ga);
                }
                if self.requires_grad(*b) {
                    let gb = slot(grads, *b, vb.numel());
                    plan.grad_rhs(g, va.data(), gb);
                }
            }
            Op::Permute(x, perm) => {
                if self.requires_grad(*x) {
                    let map = permute_index(self.shape(*x), perm);
                    let gx = slot(grads, *x, map.len());
                    for (o, &src) in map.iter().enumerate() {
                        gx[src] += g[o];
                    }
                }
            }
            Op::BroadcastTo(x) => self.acc_broadcast(*x, out_shape, grads, |o| g[o]),
            Op::Concat(xs, axis) => {
                let (outer, _, inner) = split_at_axis(out_shape, *axis);
                let total = out_shape[*axis];
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    if self.requires_grad(x) {
                        let gx = slot(grads, x, outer * len * inner);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            for (d, s) in gx[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::SumAxis(x, axis) => {
                if self.requires_grad(*x) {
                    let (outer, len, inner) = split_at_axis(self.shape(*x), *axis);
                    let gx = slot(grads, *x, outer * len * inner);
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) => self.acc_same(*x, grads, |_| g[0]),
            Op::MinAxis { x, axis, argmin } => {
                if self.requires_grad(*x) {
                    let (outer, len, inner) = split_at_axis(self.shape(*x), *axis);
                    let gx = slot(grads, *x, outer * len * inner);
                    for o in 0..outer {
                        for i in 0..inner {
                            let s = o * inner + i;
                            gx[(o * len + argmin[s]) * inner + i] += g[s];
                        }
                    }
                }
            }
            Op::Softmax { x, axis, temperature } => {
                if self.requires_grad(*x) {
                    let (outer, len, inner) = split_at_axis(out_shape, *axis);
                    let gx = slot(grads, *x, out.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dot: f64 = (0..len).map(|l| g[at(l)] * out[at(l)]).sum();
                            for l in 0..len {
                                gx[at(l)] += out[at(l)] * (g[at(l)] - dot) / temperature;
                            }
                        }
                    }
                }
            }
            Op::Select { x, axis, indices } => {
                if self.requires_grad(*x) {
                    let (outer, len, inner) = split_at_axis(self.shape(*x), *axis);
                    let gx = slot(grads, *x, outer * len * inner);
                    let picked = indices.len();
                    for o in 0..outer {
                        for (p, &ix) in indices.iter().enumerate() {
                            let src = &g[(o * picked + p) * inner..(o * picked + p + 1) * inner];
                            let dst = &mut gx[(o * len + ix) * inner..(o * len + ix + 1) * inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }

    fn acc_same(&self, x: Var, grads: &mut [Option<Vec<f64>>], f: impl Fn(usize) -> f64) {
        if !self.requires_grad(x) {
            return;
        }
        let gx = slot(grads, x, self.value(x).numel());
        for (o, d) in gx.iter_mut().enumerate() {
            *d += f(o);
        }
    }

    /// Accumulates `f(o)` for every output position `o` into the input
    /// element that was broadcast to it.
    fn acc_broadcast(&self, x: Var, out_shape: &[usize], grads: &mut [Option<Vec<f64>>], f: impl Fn(usize) -> f64) {
        if !self.requires_grad(x) {
            return;
        }
        let xs = self.shape(x);
        if xs == out_shape {
            return self.acc_same(x, grads, f);
        }
        let map = broadcast_index(xs, out_shape);
        let gx = slot(grads, x, numel(xs));
        for (o, &i) in map.iter().enumerate() {
            gx[i] += f(o);
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], x: Var, len: usize) -> &mut Vec<f64> {
    grads[x.0].get_or_insert_with(|| vec![0.0; len])
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut out = shape.to_vec();
    if keepdim {
        out[axis] = 1;
    } else {
        out.remove(axis);
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Source offset in the input for each output position of a permutation.
fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = numel(shape);
    let rank = shape.len();
    let mut map = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            off += eff[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            off -= eff[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    map
}

struct MatMulPlan {
    out_shape: Vec<usize>,
    p: usize,
    q: usize,
    r: usize,
    /// Per output batch index, the batch index into each operand. Empty when
    /// the right operand is a shared rank-2 matrix and the left operand can
    /// be treated as one tall matrix.
    a_batch: Vec<usize>,
    b_batch: Vec<usize>,
}

impl MatMulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (q2, r) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if q != q2 {
            return Err(mismatch());
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        if bb.is_empty() {
            let mut out_shape = sa.to_vec();
            *out_shape.last_mut().unwrap() = r;
            return Ok(MatMulPlan {
                out_shape,
                p: numel(ba) * p,
                q,
                r,
                a_batch: Vec::new(),
                b_batch: Vec::new(),
            });
        }
        let batch = broadcast_shapes(ba, bb).ok_or_else(mismatch)?;
        let a_batch = broadcast_index(ba, &batch);
        let b_batch = broadcast_index(bb, &batch);
        let mut out_shape = batch;
        out_shape.extend([p, r]);
        Ok(MatMulPlan {
            out_shape,
            p,
            q,
            r,
            a_batch,
            b_batch,
        })
    }

    fn batches(&self) -> usize {
        self.a_batch.len().max(1)
    }

    fn a_at(&self, t: usize) -> usize {
        self.a_batch.get(t).copied().unwrap_or(0)
    }

    fn b_at(&self, t: usize) -> usize {
        self.b_batch.get(t).copied().unwrap_or(0)
    }

    fn forward(&self, a: &[f64], b: &[f64], c: &mut [f64]) {
        let (p, q, r) = (self.p, self.q, self.r);
        for t in 0..self.batches() {
            let ab = &a[self.a_at(t) * p * q..][..p * q];
            let bb = &b[self.b_at(t) * q * r..][..q * r];
            let cb = &mut c[t * p * r..][..p * r];
            gemm(p, q, r, ab, (q, 1), bb, (r, 1), cb, (r, 1));
        }
    }

    /// dA += dC · Bᵀ
    fn grad_lhs(&self, g: &[f64], b: &[f64], ga: &mut [f64]) {
        let (p, q, r) = (self.p, self.q, self.r);
        for t in 0..self.batches() {
            let gb = &g[t * p * r..][..p * r];
            let bb = &b[self.b_at(t) * q * r..][..q * r];
            let dst = &mut ga[self.a_at(t) * p * q..][..p * q];
            gemm(p, r, q, gb, (r, 1), bb, (1, r), dst, (q, 1));
        }
    }

    /// dB += Aᵀ · dC
    fn grad_rhs(&self, g: &[f64], a: &[f64], gb: &mut [f64]) {
        let (p, q, r) = (self.p, self.q, self.r);
        for t in 0..self.batches() {
            let gt = &g[t * p * r..][..p * r];
            let ab = &a[self.a_at(t) * p * q..][..p * q];
            let dst = &mut gb[self.b_at(t) * q * r..][..q * r];
            gemm(q, p, r, ab, (1, q), gt, (r, 1), dst, (r, 1));
        }
    }
}

/// `c += a · b` for an `m×k` by `k×n` product with explicit (row, col) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the assertion above keeps every strided access of the
    // m×k, k×n and m×n row- or column-major views inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}
