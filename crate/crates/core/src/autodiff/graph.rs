//! Tape of recorded tensor operations and its reverse sweep.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and `backward` is a single reverse pass over it.

use std::collections::{HashMap, HashSet};

use super::params::{ParamId, ParameterStore};
use super::tensor::{validate_shape, Tensor};
use crate::error::{Error, Result};

/// Slope of the negative half of every hidden activation.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    LeakyRelu(Var),
    Relu(Var),
    Square(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    LogSumExp(Var),
    Reshape(Var),
    IndexRows { table: Var, rows: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-use computation tape.
///
/// Parameters pulled from a [`ParameterStore`] become leaves; only those in the
/// graph's trainable set carry `requires_grad`, so each training sub-step
/// decides up front which arrays it is allowed to touch.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    trainable: HashSet<ParamId>,
    param_vars: HashMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_trainable<I: IntoIterator<Item = ParamId>>(ids: I) -> Self {
        Self {
            trainable: ids.into_iter().collect(),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Leaf for a stored parameter; each parameter maps to exactly one node.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let trainable = self.trainable.contains(&id);
        let v = self.leaf(store.value(id).clone(), trainable);
        self.param_vars.insert(id, v);
        v
    }

    /// Adds the gradient of every trainable parameter leaf into the store.
    /// Trainable leaves with no path to the root receive zeros.
    pub fn accumulate_into(&self, store: &mut ParameterStore) {
        let mut ids: Vec<_> = self.param_vars.iter().collect();
        ids.sort_by_key(|(id, _)| **id);
        for (&id, &v) in ids {
            if !self.nodes[v.0].requires_grad {
                continue;
            }
            match self.grad(v) {
                Some(g) => store.accumulate_grad(id, g),
                None => store.accumulate_grad(id, &vec![0.0; self.value(v).len()]),
            }
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&a| f(a)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(value, op, rg)
    }

    // ---- forward ops -------------------------------------------------------

    /// `(n×k)·(k×m)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let aip = ad[i * k + p];
                let brow = &bd[p * m..(p + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Elementwise `a + b`; `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let period = broadcast_period(name, ta.shape(), tb.shape())?;
        let bd = tb.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % period]))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |a| -a, Op::Neg(x))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |a| a * c, Op::Scale(x, c))
    }

    /// Addition of a constant.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |a| a + c, Op::Offset(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some((index, &value)) = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .find(|(_, &v)| v <= 0.0 || v.is_nan())
        {
            return Err(Error::LogDomain {
                op: "log",
                index,
                value,
            });
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |a| if a > 0.0 { a } else { LEAKY_SLOPE * a },
            Op::LeakyRelu(x),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |a| if a > 0.0 || a.is_nan() { a } else { 0.0 }, Op::Relu(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |a| a * a, Op::Square(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sum over one axis; the axis is removed from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.reduce_axis("sum_axis", x, axis, false)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::SumAxis { x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.reduce_axis("mean_axis", x, axis, true)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::MeanAxis { x, axis }, rg))
    }

    fn reduce_axis(&self, op: &'static str, x: Var, axis: usize, mean: bool) -> Result<Tensor> {
        let t = self.value(x);
        let (outer, len, inner) = axis_split(op, t.shape(), axis)?;
        let d = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        Tensor::new(removed_axis(t.shape(), axis), out)
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| {
            Error::InvalidArgument("concat: at least one input required".into())
        })?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            cols += self.value(p).cols();
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(cols);
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        if start >= end || end > cols {
            return Err(Error::InvalidShape {
                op: "slice",
                shape: t.shape().to_vec(),
                reason: format!("range {start}..{end} outside last axis of width {cols}"),
            });
        }
        let mut out = Vec::with_capacity(t.rows() * (end - start));
        for r in 0..t.rows() {
            out.extend_from_slice(&t.row(r)[start..end]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = end - start;
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Slice { x, start }, rg))
    }

    /// `log Σ exp` over the last axis, evaluated with a max shift.
    pub fn log_sum_exp(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out: Vec<f64> = (0..t.rows()).map(|r| log_sum_exp(t.row(r))).collect();
        let shape = removed_axis(t.shape(), t.shape().len() - 1);
        let value = Tensor::new(shape, out).expect("reduced shape");
        let rg = self.any_grad(&[x]);
        self.push(value, Op::LogSumExp(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        validate_shape("reshape", shape)?;
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Gathers rows of a 2-D table; the result is `rows.len() × cols`.
    pub fn index_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::InvalidShape {
                op: "index_rows",
                shape: t.shape().to_vec(),
                reason: "table must be 2-D".into(),
            });
        }
        let bound = t.shape()[0];
        if let Some(&bad) = rows.iter().find(|&&r| r >= bound) {
            return Err(Error::IndexOutOfRange {
                what: "index_rows",
                index: bad,
                bound,
            });
        }
        if rows.is_empty() {
            return Err(Error::InvalidArgument("index_rows: no rows requested".into()));
        }
        let cols = t.cols();
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            out.extend_from_slice(t.row(r));
        }
        let value = Tensor::new(vec![rows.len(), cols], out)?;
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            value,
            Op::IndexRows {
                table,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    // ---- reverse sweep -----------------------------------------------------

    /// Populates gradients of `root` with respect to every node that requires
    /// them. Gradients from fan-out are summed.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.shape(root);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarRoot(shape.to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl Fn(usize) -> f64) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        match &mut self.grads[v.0] {
            Some(buf) => buf.iter_mut().enumerate().for_each(|(k, b)| *b += f(k)),
            slot @ None => *slot = Some((0..n).map(f).collect()),
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = (self.shape(a)[0], self.shape(a)[1]);
                let m = self.shape(b)[1];
                if self.requires_grad(a) {
                    let bd = self.value(b).data();
                    let mut da = vec![0.0; n * k];
                    for r in 0..n {
                        let grow = &g[r * m..(r + 1) * m];
                        for p in 0..k {
                            let brow = &bd[p * m..(p + 1) * m];
                            da[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.acc(a, |q| da[q]);
                }
                if self.requires_grad(b) {
                    let ad = self.value(a).data();
                    let mut db = vec![0.0; k * m];
                    for r in 0..n {
                        let grow = &g[r * m..(r + 1) * m];
                        for p in 0..k {
                            let arp = ad[r * k + p];
                            let drow = &mut db[p * m..(p + 1) * m];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d += arp * gv;
                            }
                        }
                    }
                    self.acc(b, |q| db[q]);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.acc(a, |q| g[q]);
                if self.requires_grad(b) {
                    let period = self.value(b).len();
                    let mut db = vec![0.0; period];
                    for (q, &gv) in g.iter().enumerate() {
                        db[q % period] += gv;
                    }
                    self.acc(b, |q| sign * db[q]);
                }
            }
            Op::Mul(a, b) => {
                let period = self.value(b).len();
                if self.requires_grad(a) {
                    let bd = self.value(b).data().to_vec();
                    self.acc(a, |q| g[q] * bd[q % period]);
                }
                if self.requires_grad(b) {
                    let ad = self.value(a).data();
                    let mut db = vec![0.0; period];
                    for (q, (&gv, &av)) in g.iter().zip(ad).enumerate() {
                        db[q % period] += gv * av;
                    }
                    self.acc(b, |q| db[q]);
                }
            }
            Op::Neg(x) => self.acc(x, |q| -g[q]),
            Op::Scale(x, c) => self.acc(x, |q| c * g[q]),
            Op::Offset(x) | Op::Reshape(x) => self.acc(x, |q| g[q]),
            Op::Exp(x) => {
                let y = self.nodes[i].value.data().to_vec();
                self.acc(x, |q| g[q] * y[q]);
            }
            Op::Log(x) => {
                let xv = self.value(x).data().to_vec();
                self.acc(x, |q| g[q] / xv[q]);
            }
            Op::Tanh(x) => {
                let y = self.nodes[i].value.data().to_vec();
                self.acc(x, |q| g[q] * (1.0 - y[q] * y[q]));
            }
            Op::LeakyRelu(x) => {
                let xv = self.value(x).data().to_vec();
                self.acc(x, |q| if xv[q] > 0.0 { g[q] } else { LEAKY_SLOPE * g[q] });
            }
            Op::Relu(x) => {
                let xv = self.value(x).data().to_vec();
                self.acc(x, |q| if xv[q] > 0.0 { g[q] } else { 0.0 });
            }
            Op::Square(x) => {
                let xv = self.value(x).data().to_vec();
                self.acc(x, |q| 2.0 * xv[q] * g[q]);
            }
            Op::Softplus(x) => {
                let xv = self.value(x).data().to_vec();
                self.acc(x, |q| g[q] * sigmoid(xv[q]));
            }
            Op::Sum(x) => self.acc(x, |_| g[0]),
            Op::Mean(x) => {
                let n = self.value(x).len() as f64;
                self.acc(x, |_| g[0] / n);
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let (_, len, inner) =
                    axis_split("reduce", self.shape(x), axis).expect("validated in forward");
                let denom = if matches!(op, Op::MeanAxis { .. }) {
                    len as f64
                } else {
                    1.0
                };
                self.acc(x, |q| {
                    let o = q / (len * inner);
                    let r = q % inner;
                    g[o * inner + r] / denom
                });
            }
            Op::Concat(parts) => {
                let rows = self.value(parts[0]).rows();
                let total: usize = g.len() / rows;
                let mut offset = 0;
                for p in parts {
                    let c = self.value(p).cols();
                    self.acc(p, |q| {
                        let (r, j) = (q / c, q % c);
                        g[r * total + offset + j]
                    });
                    offset += c;
                }
            }
            Op::Slice { x, start } => {
                let width = self.nodes[i].value.cols();
                let cols = self.value(x).cols();
                self.acc(x, |q| {
                    let (r, j) = (q / cols, q % cols);
                    if j >= start && j < start + width {
                        g[r * width + j - start]
                    } else {
                        0.0
                    }
                });
            }
            Op::LogSumExp(x) => {
                let t = self.value(x);
                let cols = t.cols();
                let xv = t.data().to_vec();
                let y = self.nodes[i].value.data().to_vec();
                self.acc(x, |q| {
                    let r = q / cols;
                    g[r] * (xv[q] - y[r]).exp()
                });
            }
            Op::IndexRows { table, rows } => {
                let cols = self.value(table).cols();
                let mut dt = vec![0.0; self.value(table).len()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..cols {
                        dt[r * cols + j] += g[k * cols + j];
                    }
                }
                self.acc(table, |q| dt[q]);
            }
        }
    }
}

/// Broadcast period of `b` against `a`: `b` equals `a` or repeats over its
/// leading axes (leading unit axes of `b` are ignored).
fn broadcast_period(op: &'static str, a: &[usize], b: &[usize]) -> Result<usize> {
    let lead_ones = b.iter().take_while(|&&d| d == 1).count();
    let tail = &b[lead_ones.min(b.len() - 1)..];
    let ok = if tail == [1] {
        true
    } else {
        a.len() >= tail.len() && a[a.len() - tail.len()..] == *tail
    };
    if !ok {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(tail.iter().product())
}

fn axis_split(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: format!("axis {axis} out of range"),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn removed_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted `log Σ exp`; `-inf` for an all-`-inf` row.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}
