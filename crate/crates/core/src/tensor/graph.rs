//! Eager tape: every op computes its value immediately and records how to
//! route gradients back to its operands. A fresh `Graph` is built per step.

use super::kernels::{self, ConvGeom, Padding};
use super::Tensor;
use crate::error::{Error, Result};
use crate::special;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, f64),
    Exp(Var),
    Log(Var),
    Pow(Var, f64),
    Sigmoid(Var),
    LogSigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    SumAxis(Var, usize),
    SumAll(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Matmul(Var, Var),
    Conv2d(Var, Var, Padding),
    Cumsum(Var),
    Clamp(Var, f64, f64),
    Digamma(Var),
    Log1mExp(Var),
    StraightThrough(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Nodes are appended in evaluation order, so the
/// operands of node `i` always have indices below `i`.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to graph nodes.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zero when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Moves the gradient out, leaving zero behind.
    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads.get_mut(v.0).and_then(Option::take) {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A fixed input; gradients are not propagated into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = kernels::broadcast_shape(va.shape(), vb.shape())?;
        let mut data = vec![0.0; shape.iter().product()];
        let (da, db) = (va.data(), vb.data());
        kernels::for_each_broadcast(va.shape(), vb.shape(), &shape, |o, i, j| {
            data[o] = f(da[i], db[j]);
        });
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    // ---- elementwise ------------------------------------------------------

    /// Broadcasting addition.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        self.unary(a, Op::Affine(a, scale), |x| scale * x + shift)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 0.0)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some((index, &value)) = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .find(|(_, &v)| v.is_nan() || v <= 0.0)
        {
            return Err(Error::Domain {
                op: "log",
                index,
                value,
            });
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    /// Elementwise power with a fixed exponent. Non-integer exponents need
    /// non-negative bases.
    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        if p.fract() != 0.0 {
            if let Some((index, &value)) =
                self.value(a).data().iter().enumerate().find(|(_, &v)| v < 0.0)
            {
                return Err(Error::Domain {
                    op: "pow",
                    index,
                    value,
                });
            }
        }
        Ok(self.unary(a, Op::Pow(a, p), |x| x.powf(p)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), special::sigmoid)
    }

    /// `log(sigmoid(a))`, evaluated without cancellation for large |a|.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::LogSigmoid(a), special::log_sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn digamma(&mut self, a: Var) -> Var {
        self.unary(a, Op::Digamma(a), special::digamma)
    }

    /// `log(1 - exp(a))` for negative entries, accurate near zero.
    pub fn log1m_exp(&mut self, a: Var) -> Result<Var> {
        if let Some((index, &value)) =
            self.value(a).data().iter().enumerate().find(|(_, &v)| !(v < 0.0))
        {
            return Err(Error::Domain {
                op: "log1m_exp",
                index,
                value,
            });
        }
        Ok(self.unary(a, Op::Log1mExp(a), special::log1m_exp))
    }

    /// Forward value `hard`, backward identity into `soft`.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(Error::dim(format!(
                "straight-through shapes differ: {:?} vs {:?}",
                hard.shape(),
                self.shape(soft)
            )));
        }
        let rg = self.rg(soft);
        Ok(self.push(hard, Op::StraightThrough(soft), rg))
    }

    // ---- reductions and shape ---------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = self.value(a).softmax_last();
        let rg = self.rg(a);
        self.push(value, Op::Softmax(a), rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let w = v.shape().last().copied().unwrap_or(1).max(1);
        let mut data = v.data().to_vec();
        for chunk in data.chunks_mut(w) {
            kernels::log_softmax_in_place(chunk);
        }
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmax(a), rg)
    }

    /// Sum over one axis, which is removed from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a);
        let shape = v.shape();
        if axis >= shape.len() {
            return Err(Error::dim(format!(
                "sum over axis {axis} of shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let d = v.data();
        for o in 0..outer {
            for m in 0..mid {
                let src = &d[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += x;
                }
            }
        }
        let mut new_shape = shape.to_vec();
        new_shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(new_shape, out)?, Op::SumAxis(a, axis), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} of shape {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::dim(format!(
                    "concat shapes {:?} and {:?} disagree off axis {axis}",
                    base, s
                )));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let w = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Inclusive cumulative sum along the last axis.
    pub fn cumsum(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let w = v.shape().last().copied().unwrap_or(1).max(1);
        let mut data = v.data().to_vec();
        for chunk in data.chunks_mut(w) {
            let mut acc = 0.0;
            for x in chunk.iter_mut() {
                acc += *x;
                *x = acc;
            }
        }
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Cumsum(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Matmul(a, b), rg))
    }

    /// Stride-1 cross-correlation of `x [N,H,L,C]` with `k [h,l,C,F]`.
    pub fn conv2d(&mut self, x: Var, k: Var, padding: Padding) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(k), padding)?;
        let out = kernels::conv2d(self.value(x).data(), self.value(k).data(), &geom);
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(
            Tensor::new(geom.out_shape(), out)?,
            Op::Conv2d(x, k, padding),
            rg,
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Each recorded entry is visited once.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads.resize(self.nodes.len(), None);
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, x) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Sums a broadcast gradient back down to `shape`.
    fn unbroadcast(g_out: &Tensor, operand: &[usize], f: impl Fn(usize, usize) -> f64) -> Tensor {
        let mut acc = vec![0.0; operand.iter().product()];
        let out_shape = g_out.shape();
        kernels::for_each_broadcast(operand, out_shape, out_shape, |o, i, _| {
            acc[i] += f(o, i);
        });
        Tensor::new(operand.to_vec(), acc).expect("operand shape")
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &self.nodes[i].value;
        let gd = g.data();
        let elementwise = |a: Var, f: &dyn Fn(f64, f64, f64) -> f64| -> Tensor {
            let x = self.value(a);
            let data = x
                .data()
                .iter()
                .zip(out.data())
                .zip(gd)
                .map(|((&xv, &yv), &gv)| f(xv, yv, gv))
                .collect();
            Tensor::new(x.shape().to_vec(), data).expect("same shape")
        };
        match &self.nodes[i].op {
            Op::Leaf | Op::Constant => {}
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.rg(a) {
                    let ga = Self::unbroadcast(g, self.shape(a), |o, _| gd[o]);
                    self.accumulate(grads, a, ga);
                }
                if self.rg(b) {
                    let gb = Self::unbroadcast(g, self.shape(b), |o, _| sign * gd[o]);
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::Mul(a, b) | &Op::Div(a, b) => {
                let is_div = matches!(self.nodes[i].op, Op::Div(..));
                let (va, vb) = (self.value(a), self.value(b));
                let shape = out.shape();
                // Gather the partner operand aligned to the output.
                let mut pa = vec![0.0; out.len()];
                let mut pb = vec![0.0; out.len()];
                kernels::for_each_broadcast(va.shape(), vb.shape(), shape, |o, ia, ib| {
                    pa[o] = va.data()[ia];
                    pb[o] = vb.data()[ib];
                });
                if self.rg(a) {
                    let ga = Self::unbroadcast(g, va.shape(), |o, _| {
                        if is_div {
                            gd[o] / pb[o]
                        } else {
                            gd[o] * pb[o]
                        }
                    });
                    self.accumulate(grads, a, ga);
                }
                if self.rg(b) {
                    let gb = Self::unbroadcast(g, vb.shape(), |o, _| {
                        if is_div {
                            -gd[o] * pa[o] / (pb[o] * pb[o])
                        } else {
                            gd[o] * pa[o]
                        }
                    });
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::Affine(a, s) => {
                let ga = g.map(|v| v * s);
                self.accumulate(grads, a, ga);
            }
            &Op::Exp(a) => {
                let ga = elementwise(a, &|_, y, gv| gv * y);
                self.accumulate(grads, a, ga);
            }
            &Op::Log(a) => {
                let ga = elementwise(a, &|x, _, gv| gv / x);
                self.accumulate(grads, a, ga);
            }
            &Op::Pow(a, p) => {
                let ga = elementwise(a, &|x, _, gv| gv * p * x.powf(p - 1.0));
                self.accumulate(grads, a, ga);
            }
            &Op::Sigmoid(a) => {
                let ga = elementwise(a, &|_, y, gv| gv * y * (1.0 - y));
                self.accumulate(grads, a, ga);
            }
            &Op::LogSigmoid(a) => {
                let ga = elementwise(a, &|x, _, gv| gv * special::sigmoid(-x));
                self.accumulate(grads, a, ga);
            }
            &Op::Tanh(a) => {
                let ga = elementwise(a, &|_, y, gv| gv * (1.0 - y * y));
                self.accumulate(grads, a, ga);
            }
            &Op::Relu(a) => {
                let ga = elementwise(a, &|x, _, gv| if x > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, a, ga);
            }
            &Op::Clamp(a, lo, hi) => {
                let ga = elementwise(a, &|x, _, gv| if x >= lo && x <= hi { gv } else { 0.0 });
                self.accumulate(grads, a, ga);
            }
            &Op::Digamma(a) => {
                let ga = elementwise(a, &|x, _, gv| gv * special::trigamma(x));
                self.accumulate(grads, a, ga);
            }
            &Op::Log1mExp(a) => {
                let ga = elementwise(a, &|x, _, gv| -gv / (-x).exp_m1());
                self.accumulate(grads, a, ga);
            }
            &Op::StraightThrough(soft) => {
                self.accumulate(grads, soft, g.clone());
            }
            &Op::Softmax(a) => {
                let w = out.shape().last().copied().unwrap_or(1).max(1);
                let mut data = vec![0.0; out.len()];
                for ((dst, y), gv) in data
                    .chunks_mut(w)
                    .zip(out.data().chunks(w))
                    .zip(gd.chunks(w))
                {
                    let dot: f64 = y.iter().zip(gv).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gvv) in dst.iter_mut().zip(y).zip(gv) {
                        *d = yv * (gvv - dot);
                    }
                }
                self.accumulate(grads, a, Tensor::new(out.shape().to_vec(), data)?);
            }
            &Op::LogSoftmax(a) => {
                let w = out.shape().last().copied().unwrap_or(1).max(1);
                let mut data = vec![0.0; out.len()];
                for ((dst, ly), gv) in data
                    .chunks_mut(w)
                    .zip(out.data().chunks(w))
                    .zip(gd.chunks(w))
                {
                    let total: f64 = gv.iter().sum();
                    for ((d, &l), &gvv) in dst.iter_mut().zip(ly).zip(gv) {
                        *d = gvv - l.exp() * total;
                    }
                }
                self.accumulate(grads, a, Tensor::new(out.shape().to_vec(), data)?);
            }
            &Op::SumAxis(a, axis) => {
                let shape = self.shape(a);
                let outer: usize = shape[..axis].iter().product();
                let mid = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let mut data = vec![0.0; outer * mid * inner];
                for o in 0..outer {
                    for m in 0..mid {
                        data[(o * mid + m) * inner..(o * mid + m + 1) * inner]
                            .copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, a, Tensor::new(shape.to_vec(), data)?);
            }
            &Op::SumAll(a) => {
                let ga = Tensor::full(self.shape(a), gd[0]);
                self.accumulate(grads, a, ga);
            }
            &Op::Reshape(a) => {
                let ga = g.reshape(self.shape(a))?;
                self.accumulate(grads, a, ga);
            }
            Op::Concat(parts, axis) => {
                let axis = *axis;
                let shape = out.shape();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let w = ps[axis] * inner;
                    if self.rg(p) {
                        let mut data = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            data.extend_from_slice(&gd[o * row + offset..o * row + offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::new(ps, data)?);
                    }
                    offset += w;
                }
            }
            &Op::Cumsum(a) => {
                let w = out.shape().last().copied().unwrap_or(1).max(1);
                let mut data = gd.to_vec();
                for chunk in data.chunks_mut(w) {
                    let mut acc = 0.0;
                    for x in chunk.iter_mut().rev() {
                        acc += *x;
                        *x = acc;
                    }
                }
                self.accumulate(grads, a, Tensor::new(out.shape().to_vec(), data)?);
            }
            &Op::Matmul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let (m, k) = va.as_matrix("matmul lhs")?;
                let n = vb.shape()[1];
                if self.rg(a) {
                    let ga = kernels::matmul_a_bt(gd, vb.data(), m, n, k);
                    self.accumulate(grads, a, Tensor::new(vec![m, k], ga)?);
                }
                if self.rg(b) {
                    let gb = kernels::matmul_at_b(va.data(), gd, m, k, n);
                    self.accumulate(grads, b, Tensor::new(vec![k, n], gb)?);
                }
            }
            &Op::Conv2d(x, k, padding) => {
                let (vx, vk) = (self.value(x), self.value(k));
                let geom = ConvGeom::new(vx.shape(), vk.shape(), padding)?;
                let (dx, dk) =
                    kernels::conv2d_backward(vx.data(), vk.data(), gd, &geom, self.rg(x), self.rg(k));
                if let Some(dx) = dx {
                    self.accumulate(grads, x, Tensor::new(vx.shape().to_vec(), dx)?);
                }
                if let Some(dk) = dk {
                    self.accumulate(grads, k, Tensor::new(vk.shape().to_vec(), dk)?);
                }
            }
        }
        Ok(())
    }
}
