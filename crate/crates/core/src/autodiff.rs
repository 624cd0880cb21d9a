//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Nodes are
//! appended in evaluation order, so the node index is already a topological
//! order and [`Tape::backward`] simply walks the arena in reverse.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Axis selector for [`Tape::masked_reduce`] on an `N×M×C` tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceAxis {
    /// Average over `n`, producing `M×C`.
    Rows,
    /// Average over `m`, producing `N×C`.
    Cols,
    /// Average over `(n, m)`, producing `C`.
    All,
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Relu(Var),
    Square(Var),
    Softplus(Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    IndexLast(Var, usize),
    MaskChannels(Var, Var),
    Reduce { z: Var, mask: Option<Var>, axis: ReduceAxis },
    AddColTerm(Var, Var),
    AddRowTerm(Var, Var),
    AddBias(Var, Var),
}

/// Gradient slot for `v`, allocated as zeros on first use.
fn slot<'g>(grads: &'g mut [Option<Tensor>], nodes: &[Node], v: Var) -> &'g mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()))
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-owner computation graph for one forward/backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension { op, detail: format!("{:?} vs {:?}", a, b) }
}

fn split3(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, m, c] => Ok((n, m, c)),
        _ => Err(Error::Dimension { op, detail: format!("expected rank-3, got {:?}", shape) }),
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    // ln(e^y - 1) = y + ln(1 - e^-y)
    y + libm::log(-libm::expm1(-y))
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable input whose gradient is retained after [`backward`](Self::backward).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    // ----- forward operations -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(dim_err("matmul_nt", sa, sb));
        }
        let (n, k, m) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; n * m];
        matmul_nt_into(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() != 2 {
            return Err(Error::Dimension { op: "transpose", detail: format!("{:?}", self.shape(a)) });
        }
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = if ta.shape() == tb.shape() {
            ta.zip_map(tb, f)
        } else if tb.numel() == 1 {
            let s = tb.item();
            ta.map(|x| f(x, s))
        } else if ta.numel() == 1 {
            let s = ta.item();
            tb.map(|y| f(s, y))
        } else {
            return Err(dim_err(name, ta.shape(), tb.shape()));
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&v| v == 0.0) {
            return Err(Error::Numeric("division by exact zero".into()));
        }
        self.binary(a, b, Op::Div(a, b), "div", |x, y| x / y)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(out, Op::Square(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        let rg = self.rg(a);
        self.push(out, Op::Softplus(a), rg)
    }

    /// Multiplication by a fixed scalar.
    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Slice `a[..., i]` along the last axis.
    pub fn index_last(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        let Some((&last, lead)) = t.shape().split_last() else {
            return Err(Error::Dimension { op: "index_last", detail: "rank-0 input".into() });
        };
        if i >= last {
            return Err(Error::Dimension { op: "index_last", detail: format!("index {i} of {last}") });
        }
        let out: Vec<f64> = t.data().iter().skip(i).step_by(last).copied().collect();
        let out = Tensor::new(lead, out)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::IndexLast(a, i), rg))
    }

    /// `out[n,m,c] = mask[n,m] · z[n,m,c]`.
    pub fn mask_channels(&mut self, z: Var, mask: Var) -> Result<Var> {
        let (n, m, c) = split3(self.shape(z), "mask_channels")?;
        if self.shape(mask) != [n, m] {
            return Err(dim_err("mask_channels", self.shape(z), self.shape(mask)));
        }
        let (tz, tb) = (self.value(z).data(), self.value(mask).data());
        let mut out = Vec::with_capacity(n * m * c);
        for (cell, &b) in tz.chunks_exact(c).zip(tb) {
            out.extend(cell.iter().map(|&v| v * b));
        }
        let out = Tensor::new(&[n, m, c], out)?;
        let rg = self.rg(z) || self.rg(mask);
        Ok(self.push(out, Op::MaskChannels(z, mask), rg))
    }

    /// Mask-weighted average `Σ b·z / Σ b` of an `N×M×C` tensor along `axis`.
    ///
    /// Slices with no observed entry average to 0.
    pub fn masked_reduce(&mut self, z: Var, mask: Var, axis: ReduceAxis) -> Result<Var> {
        let (n, m, _) = split3(self.shape(z), "masked_reduce")?;
        if self.shape(mask) != [n, m] {
            return Err(dim_err("masked_reduce", self.shape(z), self.shape(mask)));
        }
        let out = reduce_forward(self.value(z), Some(self.value(mask)), axis);
        let rg = self.rg(z);
        Ok(self.push(out, Op::Reduce { z, mask: Some(mask), axis }, rg))
    }

    /// Unweighted mean of an `N×M×C` tensor along `axis`.
    pub fn mean_reduce(&mut self, z: Var, axis: ReduceAxis) -> Result<Var> {
        split3(self.shape(z), "mean_reduce")?;
        let out = reduce_forward(self.value(z), None, axis);
        let rg = self.rg(z);
        Ok(self.push(out, Op::Reduce { z, mask: None, axis }, rg))
    }

    /// `out[n,m,c] = z[n,m,c] + t[m,c]`.
    pub fn add_col_term(&mut self, z: Var, t: Var) -> Result<Var> {
        let (n, m, c) = split3(self.shape(z), "add_col_term")?;
        if self.shape(t) != [m, c] {
            return Err(dim_err("add_col_term", self.shape(z), self.shape(t)));
        }
        let mut out = self.value(z).clone();
        let tt = self.value(t).data();
        for row in out.data_mut().chunks_exact_mut(m * c).take(n) {
            for (o, &v) in row.iter_mut().zip(tt) {
                *o += v;
            }
        }
        let rg = self.rg(z) || self.rg(t);
        Ok(self.push(out, Op::AddColTerm(z, t), rg))
    }

    /// `out[n,m,c] = z[n,m,c] + t[n,c]`.
    pub fn add_row_term(&mut self, z: Var, t: Var) -> Result<Var> {
        let (n, m, c) = split3(self.shape(z), "add_row_term")?;
        if self.shape(t) != [n, c] {
            return Err(dim_err("add_row_term", self.shape(z), self.shape(t)));
        }
        let mut out = self.value(z).clone();
        let tt = self.value(t).data();
        for (i, row) in out.data_mut().chunks_exact_mut(m * c).enumerate() {
            let ti = &tt[i * c..(i + 1) * c];
            for cell in row.chunks_exact_mut(c) {
                for (o, &v) in cell.iter_mut().zip(ti) {
                    *o += v;
                }
            }
        }
        let rg = self.rg(z) || self.rg(t);
        Ok(self.push(out, Op::AddRowTerm(z, t), rg))
    }

    /// Adds a vector `b[C]` along the last axis of `z[..., C]`.
    pub fn add_bias(&mut self, z: Var, b: Var) -> Result<Var> {
        let c = *self.shape(z).last().unwrap_or(&0);
        if self.shape(b) != [c] {
            return Err(dim_err("add_bias", self.shape(z), self.shape(b)));
        }
        let mut out = self.value(z).clone();
        let tb = self.value(b).data();
        for cell in out.data_mut().chunks_exact_mut(c) {
            for (o, &v) in cell.iter_mut().zip(tb) {
                *o += v;
            }
        }
        let rg = self.rg(z) || self.rg(b);
        Ok(self.push(out, Op::AddBias(z, b), rg))
    }

    // ----- reverse pass -----

    /// Back-propagates from a scalar `loss`, leaving gradients readable via
    /// [`grad`](Self::grad). May be called once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract("backward already ran on this tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let op = self.nodes[idx].op;
            if matches!(op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[idx].take() else { continue };
            self.propagate(op, &g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }


    /// Reduces a gradient of a broadcast result back onto operand `v`.
    fn accumulate_broadcast(&mut self, v: Var, delta: Tensor) {
        if self.shape(v) != delta.shape() {
            let shape = self.shape(v).to_vec();
            let s = delta.sum();
            self.accumulate(v, Tensor::full(&shape, s));
        } else {
            self.accumulate(v, delta);
        }
    }

    fn operand(&self, v: Var, like: &Tensor) -> Tensor {
        let t = self.value(v);
        if t.shape() == like.shape() {
            t.clone()
        } else {
            Tensor::full(like.shape(), t.item())
        }
    }

    fn propagate(&mut self, op: Op, g: &Tensor) {
        match op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                if self.rg(a) {
                    let bv = self.nodes[b.0].value.data();
                    let slot = slot(&mut self.grads, &self.nodes, a);
                    matmul_nt_into(g.data(), bv, slot.data_mut(), n, m, k);
                }
                if self.rg(b) {
                    let av = self.nodes[a.0].value.data();
                    let slot = slot(&mut self.grads, &self.nodes, b);
                    matmul_tn_into(av, g.data(), slot.data_mut(), k, n, m);
                }
            }
            Op::MatMulNt(a, b) => {
                let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
                let (n, k, m) = (sa[0], sa[1], sb[0]);
                if self.rg(a) {
                    let bv = self.nodes[b.0].value.data();
                    let slot = slot(&mut self.grads, &self.nodes, a);
                    matmul_into(g.data(), bv, slot.data_mut(), n, m, k);
                }
                if self.rg(b) {
                    let av = self.nodes[a.0].value.data();
                    let slot = slot(&mut self.grads, &self.nodes, b);
                    matmul_tn_into(g.data(), av, slot.data_mut(), m, n, k);
                }
            }
            Op::Transpose(a) => self.accumulate(a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate_broadcast(a, g.clone());
                self.accumulate_broadcast(b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate_broadcast(a, g.clone());
                self.accumulate_broadcast(b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    let bv = self.operand(b, g);
                    self.accumulate_broadcast(a, g.zip_map(&bv, |gi, y| gi * y));
                }
                if self.rg(b) {
                    let av = self.operand(a, g);
                    self.accumulate_broadcast(b, g.zip_map(&av, |gi, x| gi * x));
                }
            }
            Op::Div(a, b) => {
                let bv = self.operand(b, g);
                if self.rg(a) {
                    self.accumulate_broadcast(a, g.zip_map(&bv, |gi, y| gi / y));
                }
                if self.rg(b) {
                    let av = self.operand(a, g);
                    let t = g.zip_map(&av, |gi, x| gi * x).zip_map(&bv, |p, y| -p / (y * y));
                    self.accumulate_broadcast(b, t);
                }
            }
            Op::Relu(a) => {
                let d = g.zip_map(self.value(a), |gi, x| if x > 0.0 { gi } else { 0.0 });
                self.accumulate(a, d);
            }
            Op::Square(a) => {
                let d = g.zip_map(self.value(a), |gi, x| 2.0 * x * gi);
                self.accumulate(a, d);
            }
            Op::Softplus(a) => {
                let d = g.zip_map(self.value(a), |gi, x| gi * sigmoid(x));
                self.accumulate(a, d);
            }
            Op::Scale(a, s) => self.accumulate(a, g.map(|x| x * s)),
            Op::Sum(a) => {
                let shape = self.shape(a).to_vec();
                self.accumulate(a, Tensor::full(&shape, g.item()));
            }
            Op::Reshape(a) => {
                let shape = self.shape(a).to_vec();
                let d = g.clone().reshape(&shape).expect("reshape preserves numel");
                self.accumulate(a, d);
            }
            Op::IndexLast(a, i) => {
                let last = *self.shape(a).last().expect("checked in forward");
                let slot = slot(&mut self.grads, &self.nodes, a);
                for (dst, &gv) in slot.data_mut().iter_mut().skip(i).step_by(last).zip(g.data()) {
                    *dst += gv;
                }
            }
            Op::MaskChannels(z, mask) => {
                let c = self.shape(z)[2];
                if self.rg(z) {
                    let bv = self.nodes[mask.0].value.data();
                    let slot = slot(&mut self.grads, &self.nodes, z);
                    for ((dst, gc), &b) in
                        slot.data_mut().chunks_exact_mut(c).zip(g.data().chunks_exact(c)).zip(bv)
                    {
                        for (d, &gv) in dst.iter_mut().zip(gc) {
                            *d += gv * b;
                        }
                    }
                }
                if self.rg(mask) {
                    let zv = self.value(z).data();
                    let d: Vec<f64> = zv
                        .chunks_exact(c)
                        .zip(g.data().chunks_exact(c))
                        .map(|(zc, gc)| zc.iter().zip(gc).map(|(x, y)| x * y).sum())
                        .collect();
                    let shape = self.shape(mask).to_vec();
                    self.accumulate(mask, Tensor::new(&shape, d).expect("mask shape"));
                }
            }
            Op::Reduce { z, mask, axis } => {
                let mask_t = mask.map(|mv| self.nodes[mv.0].value.clone());
                let shape = self.shape(z).to_vec();
                let d = reduce_backward(&shape, mask_t.as_ref(), axis, g);
                self.accumulate(z, d);
            }
            Op::AddColTerm(z, t) => {
                self.accumulate(z, g.clone());
                if self.rg(t) {
                    let (n, m, c) = split3(self.shape(z), "").expect("rank-3");
                    let slot = slot(&mut self.grads, &self.nodes, t);
                    for row in g.data().chunks_exact(m * c).take(n) {
                        for (d, &gv) in slot.data_mut().iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::AddRowTerm(z, t) => {
                self.accumulate(z, g.clone());
                if self.rg(t) {
                    let (_, m, c) = split3(self.shape(z), "").expect("rank-3");
                    let slot = slot(&mut self.grads, &self.nodes, t);
                    for (i, row) in g.data().chunks_exact(m * c).enumerate() {
                        let dst = &mut slot.data_mut()[i * c..(i + 1) * c];
                        for cell in row.chunks_exact(c) {
                            for (d, &gv) in dst.iter_mut().zip(cell) {
                                *d += gv;
                            }
                        }
                    }
                }
            }
            Op::AddBias(z, b) => {
                self.accumulate(z, g.clone());
                if self.rg(b) {
                    let c = self.shape(b)[0];
                    let slot = slot(&mut self.grads, &self.nodes, b);
                    for cell in g.data().chunks_exact(c) {
                        for (d, &gv) in slot.data_mut().iter_mut().zip(cell) {
                            *d += gv;
                        }
                    }
                }
            }
        }
    }
}

fn reduce_forward(z: &Tensor, mask: Option<&Tensor>, axis: ReduceAxis) -> Tensor {
    let (n, m, c) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    let zd = z.data();
    let b = |i: usize, j: usize| mask.map_or(1.0, |t| t.data()[i * m + j]);
    match axis {
        ReduceAxis::Rows => {
            let mut out = vec![0.0; m * c];
            let mut cnt = vec![0.0; m];
            for i in 0..n {
                for j in 0..m {
                    let w = b(i, j);
                    cnt[j] += w;
                    if w != 0.0 {
                        let cell = &zd[(i * m + j) * c..(i * m + j + 1) * c];
                        for (o, &v) in out[j * c..(j + 1) * c].iter_mut().zip(cell) {
                            *o += w * v;
                        }
                    }
                }
            }
            for j in 0..m {
                let inv = if cnt[j] > 0.0 { 1.0 / cnt[j] } else { 0.0 };
                out[j * c..(j + 1) * c].iter_mut().for_each(|o| *o *= inv);
            }
            Tensor::new(&[m, c], out).expect("shape")
        }
        ReduceAxis::Cols => {
            let mut out = vec![0.0; n * c];
            for i in 0..n {
                let mut cnt = 0.0;
                let acc = &mut out[i * c..(i + 1) * c];
                for j in 0..m {
                    let w = b(i, j);
                    cnt += w;
                    if w != 0.0 {
                        let cell = &zd[(i * m + j) * c..(i * m + j + 1) * c];
                        for (o, &v) in acc.iter_mut().zip(cell) {
                            *o += w * v;
                        }
                    }
                }
                let inv = if cnt > 0.0 { 1.0 / cnt } else { 0.0 };
                acc.iter_mut().for_each(|o| *o *= inv);
            }
            Tensor::new(&[n, c], out).expect("shape")
        }
        ReduceAxis::All => {
            let mut out = vec![0.0; c];
            let mut cnt = 0.0;
            for i in 0..n {
                for j in 0..m {
                    let w = b(i, j);
                    cnt += w;
                    if w != 0.0 {
                        let cell = &zd[(i * m + j) * c..(i * m + j + 1) * c];
                        for (o, &v) in out.iter_mut().zip(cell) {
                            *o += w * v;
                        }
                    }
                }
            }
            let inv = if cnt > 0.0 { 1.0 / cnt } else { 0.0 };
            out.iter_mut().for_each(|o| *o *= inv);
            Tensor::new(&[c], out).expect("shape")
        }
    }
}

fn reduce_backward(shape: &[usize], mask: Option<&Tensor>, axis: ReduceAxis, g: &Tensor) -> Tensor {
    let (n, m, c) = (shape[0], shape[1], shape[2]);
    let b = |i: usize, j: usize| mask.map_or(1.0, |t| t.data()[i * m + j]);
    let gd = g.data();
    let mut out = vec![0.0; n * m * c];
    match axis {
        ReduceAxis::Rows => {
            let mut cnt = vec![0.0; m];
            for i in 0..n {
                for (j, cj) in cnt.iter_mut().enumerate() {
                    *cj += b(i, j);
                }
            }
            for i in 0..n {
                for j in 0..m {
                    let w = b(i, j);
                    if w == 0.0 || cnt[j] == 0.0 {
                        continue;
                    }
                    let s = w / cnt[j];
                    let dst = &mut out[(i * m + j) * c..(i * m + j + 1) * c];
                    for (d, &gv) in dst.iter_mut().zip(&gd[j * c..(j + 1) * c]) {
                        *d = gv * s;
                    }
                }
            }
        }
        ReduceAxis::Cols => {
            for i in 0..n {
                let cnt: f64 = (0..m).map(|j| b(i, j)).sum();
                if cnt == 0.0 {
                    continue;
                }
                for j in 0..m {
                    let w = b(i, j);
                    if w == 0.0 {
                        continue;
                    }
                    let s = w / cnt;
                    let dst = &mut out[(i * m + j) * c..(i * m + j + 1) * c];
                    for (d, &gv) in dst.iter_mut().zip(&gd[i * c..(i + 1) * c]) {
                        *d = gv * s;
                    }
                }
            }
        }
        ReduceAxis::All => {
            let mut cnt = 0.0;
            for i in 0..n {
                for j in 0..m {
                    cnt += b(i, j);
                }
            }
            if cnt > 0.0 {
                for i in 0..n {
                    for j in 0..m {
                        let w = b(i, j);
                        if w == 0.0 {
                            continue;
                        }
                        let s = w / cnt;
                        let dst = &mut out[(i * m + j) * c..(i * m + j + 1) * c];
                        for (d, &gv) in dst.iter_mut().zip(gd) {
                            *d = gv * s;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(shape, out).expect("shape")
}
