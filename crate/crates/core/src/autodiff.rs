//! Reverse-mode differentiation on an append-only tape.
//!
//! Every operation appends a node holding its value and the indices of its
//! parents, so the node list is already in topological order and
//! [`Graph::backward`] is a single reverse sweep. Nodes are addressed by the
//! copyable handle [`Var`].
//!
//! Binary operations broadcast only in two ways: a one-element operand
//! against anything, or a `[C]` operand against a tensor whose last axis is
//! `C`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::Lu;
use crate::math;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Tanh,
    Relu,
    Neg,
    Abs,
}

impl Elementwise {
    fn is_binary(self) -> bool {
        matches!(
            self,
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul | Elementwise::Div
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// What to do when `backward` runs a second time on the same graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackwardMode {
    #[default]
    Reject,
    Accumulate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    ScalarLhs,
    ScalarRhs,
    ChannelLhs,
    ChannelRhs,
}

impl Bcast {
    #[inline]
    fn indices(self, i: usize, c: usize) -> (usize, usize) {
        match self {
            Bcast::Same => (i, i),
            Bcast::ScalarLhs => (0, i),
            Bcast::ScalarRhs => (i, 0),
            Bcast::ChannelLhs => (i % c, i),
            Bcast::ChannelRhs => (i, i % c),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Unary(Elementwise, Var),
    Binary(Elementwise, Var, Var, Bcast),
    Scale(Var, f64),
    Conv2d { input: Var, kernel: Var, bias: Var },
    Linear { x: Var, w: Var },
    Slice { src: Var, start: usize },
    Concat(Vec<Var>),
    Reduce { src: Var, kind: Reduction, reduced: Vec<bool> },
    Squeeze(Var),
    Unsqueeze(Var),
    ExpandSpatial(Var),
    LogAbsDet(Var),
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every leaf that asked for one.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.map.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.map.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    grad_enabled: bool,
    backward_done: bool,
}

impl Graph {
    /// A graph that records gradient information for parameters.
    pub fn new() -> Self {
        Graph {
            grad_enabled: true,
            ..Default::default()
        }
    }

    /// A graph where [`Graph::param`] behaves like [`Graph::constant`].
    pub fn no_grad() -> Self {
        Graph::default()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient (unless the graph is `no_grad`).
    pub fn param(&mut self, t: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push(t, Op::Leaf, rg)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Applies an elementwise operation; `b` is required for binary kinds
    /// and must be absent for unary ones.
    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind.is_binary(), b) {
            (true, Some(b)) => self.binary(kind, a, b),
            (false, None) => self.unary(kind, a),
            (true, None) => Err(Error::contract("elementwise", format!("{kind:?} needs two operands"))),
            (false, Some(_)) => Err(Error::contract("elementwise", format!("{kind:?} takes one operand"))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Div, a, b)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Log, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Relu, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Neg, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Abs, a)
    }

    /// Multiplies by a fixed constant.
    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|v| v * k);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, k), rg)
    }

    fn unary(&mut self, kind: Elementwise, a: Var) -> Result<Var> {
        let x = self.value(a);
        let value = match kind {
            Elementwise::Exp => x.map(math::exp),
            Elementwise::Log => {
                if let Some(bad) = x.data().iter().find(|&&v| !(v > 0.0)) {
                    return Err(Error::domain("log", format!("argument {bad} is not strictly positive")));
                }
                x.map(math::ln)
            }
            Elementwise::Tanh => x.map(math::tanh),
            Elementwise::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
            Elementwise::Neg => x.map(|v| -v),
            Elementwise::Abs => x.map(f64::abs),
            _ => unreachable!("binary kind in unary"),
        };
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Unary(kind, a), rg))
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<(Bcast, Vec<usize>)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let na: usize = sa.iter().product();
        let nb: usize = sb.iter().product();
        if sa == sb {
            Ok((Bcast::Same, sa.to_vec()))
        } else if nb == 1 && (na != 1 || sa.len() >= sb.len()) {
            Ok((Bcast::ScalarRhs, sa.to_vec()))
        } else if na == 1 {
            Ok((Bcast::ScalarLhs, sb.to_vec()))
        } else if sb.len() == 1 && sa.last() == Some(&sb[0]) {
            Ok((Bcast::ChannelRhs, sa.to_vec()))
        } else if sa.len() == 1 && sb.last() == Some(&sa[0]) {
            Ok((Bcast::ChannelLhs, sb.to_vec()))
        } else {
            Err(Error::contract(op, format!("cannot broadcast {sa:?} with {sb:?}")))
        }
    }

    fn binary(&mut self, kind: Elementwise, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Elementwise::Add => "add",
            Elementwise::Sub => "sub",
            Elementwise::Mul => "mul",
            _ => "div",
        };
        let (mode, shape) = self.broadcast(name, a, b)?;
        let xa = self.value(a).data();
        let xb = self.value(b).data();
        if kind == Elementwise::Div && xb.iter().any(|&v| v == 0.0) {
            return Err(Error::domain("div", "divisor contains zero"));
        }
        let c = *shape.last().unwrap();
        let n: usize = shape.iter().product();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (ia, ib) = mode.indices(i, c);
            let (u, v) = (xa[ia], xb[ib]);
            out.push(match kind {
                Elementwise::Add => u + v,
                Elementwise::Sub => u - v,
                Elementwise::Mul => u * v,
                _ => u / v,
            });
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Binary(kind, a, b, mode), rg))
    }

    /// Same-padded, stride-1 2-D convolution over NHWC input with an
    /// HWIO kernel `[kh, kw, c_in, c_out]` and bias `[c_out]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let si = self.shape(input);
        let sk = self.shape(kernel);
        let sb = self.shape(bias);
        if si.len() != 4 || sk.len() != 4 {
            return Err(Error::contract("conv2d", format!("input {si:?}, kernel {sk:?} must be rank 4")));
        }
        let (kh, kw, ci, co) = (sk[0], sk[1], sk[2], sk[3]);
        if !matches!(kh, 1 | 3) || !matches!(kw, 1 | 3) {
            return Err(Error::contract("conv2d", format!("kernel {kh}x{kw} not supported")));
        }
        if si[3] != ci {
            return Err(Error::contract("conv2d", format!("input has {} channels, kernel expects {ci}", si[3])));
        }
        if sb != [co] {
            return Err(Error::contract("conv2d", format!("bias {sb:?} does not match {co} outputs")));
        }
        let (n, h, w) = (si[0], si[1], si[2]);
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let bv = self.value(bias).data();
        let mut out = vec![0.0; n * h * w * co];
        for chunk in out.chunks_mut(co) {
            chunk.copy_from_slice(bv);
        }
        for_each_tap(n, h, w, kh, kw, |opos, ipos, tap| {
            let orow = &mut out[opos * co..(opos + 1) * co];
            let xin = &x[ipos * ci..(ipos + 1) * ci];
            for (c, &xv) in xin.iter().enumerate() {
                let krow = &k[(tap * ci + c) * co..(tap * ci + c + 1) * co];
                for (o, &kv) in orow.iter_mut().zip(krow) {
                    *o += xv * kv;
                }
            }
        });
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(
            Tensor::new(&[n, h, w, co], out)?,
            Op::Conv2d { input, kernel, bias },
            rg,
        ))
    }

    /// `y[..., o] = Σ_i w[o, i] · x[..., i]`, i.e. a matrix applied along
    /// the last axis.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w);
        if sw.len() != 2 || sw[1] != *sx.last().unwrap() {
            return Err(Error::contract("linear", format!("weight {sw:?} cannot act on {sx:?}")));
        }
        let (co, ci) = (sw[0], sw[1]);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let rows = xv.len() / ci;
        let mut out = vec![0.0; rows * co];
        for r in 0..rows {
            let xr = &xv[r * ci..(r + 1) * ci];
            for o in 0..co {
                let wr = &wv[o * ci..(o + 1) * ci];
                out[r * co + o] = dot(wr, xr);
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = co;
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Linear { x, w }, rg))
    }

    /// Splits along the last axis into consecutive blocks of the given sizes.
    pub fn channel_split(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let c = *self.shape(x).last().unwrap();
        let total: usize = sizes.iter().sum();
        if total != c || sizes.iter().any(|&s| s == 0) {
            return Err(Error::contract(
                "channel_split",
                format!("sizes {sizes:?} do not partition {c} channels"),
            ));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &width in sizes {
            parts.push(self.slice_channels(x, start, width));
            start += width;
        }
        Ok(parts)
    }

    fn slice_channels(&mut self, x: Var, start: usize, width: usize) -> Var {
        let src = self.value(x);
        let c = src.channels();
        let mut shape = src.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        let mut out = Vec::with_capacity(src.len() / c * width);
        for row in src.data().chunks(c) {
            out.extend_from_slice(&row[start..start + width]);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&shape, out).unwrap(), Op::Slice { src: x, start }, rg)
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat", "no operands"))?;
        let lead = &self.shape(*first)[..self.shape(*first).len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if &s[..s.len() - 1] != lead {
                return Err(Error::contract("concat", format!("{s:?} vs leading {lead:?}")));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &wd) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[r * wd..(r + 1) * wd]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Sums or averages over `axes` (all axes when `None`). Reduced axes
    /// are dropped; reducing everything yields shape `[1]`.
    pub fn reduce(&mut self, kind: Reduction, x: Var, axes: Option<&[usize]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut reduced = vec![axes.is_none(); shape.len()];
        if let Some(axes) = axes {
            for &a in axes {
                if a >= shape.len() {
                    return Err(Error::contract("reduce", format!("axis {a} invalid for rank {}", shape.len())));
                }
                reduced[a] = true;
            }
        }
        let mut out_shape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&d, _)| d)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let count: usize = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| r)
            .map(|(&d, _)| d)
            .product();
        let map = reduce_index_map(&shape, &reduced);
        let mut out = vec![0.0; out_shape.iter().product()];
        for (v, &o) in self.value(x).data().iter().zip(&map) {
            out[o] += v;
        }
        if kind == Reduction::Mean {
            let inv = 1.0 / count as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Reduce { src: x, kind, reduced }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce(Reduction::Sum, x, None).expect("full reduction")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.reduce(Reduction::Mean, x, None).expect("full reduction")
    }

    /// Per-sample sum over every axis but the first; gives shape `[N]`.
    pub fn sum_per_sample(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(Error::contract("sum_per_sample", "needs a batch axis and at least one more"));
        }
        let axes: Vec<usize> = (1..rank).collect();
        self.reduce(Reduction::Sum, x, Some(&axes))
    }

    /// Space-to-depth by a factor of two: `[N, H, W, C]` becomes
    /// `[N, H/2, W/2, 4C]` with output channel `4c + 2dy + dx`.
    pub fn squeeze2x2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::contract("squeeze", format!("shape {s:?} needs even H and W")));
        }
        let out = squeeze_data(self.value(x).data(), &s, false);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(&[s[0], s[1] / 2, s[2] / 2, s[3] * 4], out)?,
            Op::Squeeze(x),
            rg,
        ))
    }

    /// Exact inverse of [`Graph::squeeze2x2`].
    pub fn unsqueeze2x2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[3] % 4 != 0 {
            return Err(Error::contract("unsqueeze", format!("shape {s:?} needs channels divisible by 4")));
        }
        let full = [s[0], s[1] * 2, s[2] * 2, s[3] / 4];
        let out = squeeze_data(self.value(x).data(), &full, true);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&full, out)?, Op::Unsqueeze(x), rg))
    }

    /// Repeats `[N, C]` over a spatial grid to `[N, H, W, C]`.
    pub fn expand_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::contract("expand_spatial", format!("expected [N, C], got {s:?}")));
        }
        let (n, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * h * w * c);
        for row in src.chunks(c) {
            for _ in 0..h * w {
                out.extend_from_slice(row);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[n, h, w, c], out)?, Op::ExpandSpatial(x), rg))
    }

    /// `log|det W|` of a square matrix, as a one-element tensor.
    pub fn log_abs_det(&mut self, w: Var) -> Result<Var> {
        let lu = Lu::factor(self.value(w))?;
        let value = lu.log_abs_det();
        if !value.is_finite() {
            return Err(Error::domain("log_abs_det", "matrix is singular"));
        }
        let rg = self.rg(&[w]);
        Ok(self.push(Tensor::scalar(value), Op::LogAbsDet(w), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Reverse sweep from a one-element `loss`, rejecting a second call.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.backward_with(loss, BackwardMode::Reject)
    }

    pub fn backward_with(&mut self, loss: Var, mode: BackwardMode) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, has shape {:?}", self.shape(loss)),
            ));
        }
        if self.backward_done && mode == BackwardMode::Reject {
            return Err(Error::contract(
                "backward",
                "graph was already differentiated; pass BackwardMode::Accumulate to add to it",
            ));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize(self.nodes.len(), None);
        }
        let mut out = Gradients::default();
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let slot = &mut self.grads[i];
            match (slot.as_mut(), mode) {
                (Some(acc), BackwardMode::Accumulate) => {
                    acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                _ => *slot = Some(g),
            }
            let shape = self.nodes[i].value.shape();
            out.map.insert(
                Var(i),
                Tensor::new(shape, slot.clone().unwrap()).expect("grad shape"),
            );
        }
        Ok(out)
    }

    /// Gradient held for `v` after the latest backward sweep.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v), g.clone()).expect("grad shape"))
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(buf);
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Unary(kind, a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for j in 0..ga.len() {
                        ga[j] += match kind {
                            Elementwise::Exp => g[j] * y[j],
                            Elementwise::Log => g[j] / x[j],
                            Elementwise::Tanh => g[j] * (1.0 - y[j] * y[j]),
                            Elementwise::Relu => {
                                if x[j] > 0.0 {
                                    g[j]
                                } else {
                                    0.0
                                }
                            }
                            Elementwise::Neg => -g[j],
                            Elementwise::Abs => {
                                if x[j] > 0.0 {
                                    g[j]
                                } else if x[j] < 0.0 {
                                    -g[j]
                                } else {
                                    0.0
                                }
                            }
                            _ => unreachable!(),
                        };
                    }
                });
            }
            Op::Binary(kind, a, b, mode) => {
                let xa = self.value(*a).data();
                let xb = self.value(*b).data();
                let c = node.value.channels();
                self.accumulate(grads, *a, |ga| {
                    for (j, &gj) in g.iter().enumerate() {
                        let (ia, ib) = mode.indices(j, c);
                        ga[ia] += match kind {
                            Elementwise::Add | Elementwise::Sub => gj,
                            Elementwise::Mul => gj * xb[ib],
                            _ => gj / xb[ib],
                        };
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (j, &gj) in g.iter().enumerate() {
                        let (ia, ib) = mode.indices(j, c);
                        gb[ib] += match kind {
                            Elementwise::Add => gj,
                            Elementwise::Sub => -gj,
                            Elementwise::Mul => gj * xa[ia],
                            _ => -gj * xa[ia] / (xb[ib] * xb[ib]),
                        };
                    }
                });
            }
            Op::Scale(a, k) => {
                self.accumulate(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s * k);
                });
            }
            Op::Conv2d { input, kernel, bias } => {
                let si = self.shape(*input);
                let sk = self.shape(*kernel);
                let (n, h, w, ci) = (si[0], si[1], si[2], si[3]);
                let (kh, kw, co) = (sk[0], sk[1], sk[3]);
                let x = self.value(*input).data();
                let k = self.value(*kernel).data();
                self.accumulate(grads, *bias, |gb| {
                    for row in g.chunks(co) {
                        gb.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                    }
                });
                self.accumulate(grads, *input, |gx| {
                    for_each_tap(n, h, w, kh, kw, |opos, ipos, tap| {
                        let grow = &g[opos * co..(opos + 1) * co];
                        let gin = &mut gx[ipos * ci..(ipos + 1) * ci];
                        for (c, d) in gin.iter_mut().enumerate() {
                            let krow = &k[(tap * ci + c) * co..(tap * ci + c + 1) * co];
                            *d += dot(krow, grow);
                        }
                    });
                });
                self.accumulate(grads, *kernel, |gk| {
                    for_each_tap(n, h, w, kh, kw, |opos, ipos, tap| {
                        let grow = &g[opos * co..(opos + 1) * co];
                        let xin = &x[ipos * ci..(ipos + 1) * ci];
                        for (c, &xv) in xin.iter().enumerate() {
                            let krow = &mut gk[(tap * ci + c) * co..(tap * ci + c + 1) * co];
                            krow.iter_mut().zip(grow).for_each(|(d, s)| *d += xv * s);
                        }
                    });
                });
            }
            Op::Linear { x, w } => {
                let sw = self.shape(*w);
                let (co, ci) = (sw[0], sw[1]);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                self.accumulate(grads, *x, |gx| {
                    for (r, grow) in g.chunks(co).enumerate() {
                        let gxr = &mut gx[r * ci..(r + 1) * ci];
                        for (o, &go) in grow.iter().enumerate() {
                            let wr = &wv[o * ci..(o + 1) * ci];
                            gxr.iter_mut().zip(wr).for_each(|(d, s)| *d += go * s);
                        }
                    }
                });
                self.accumulate(grads, *w, |gw| {
                    for (r, grow) in g.chunks(co).enumerate() {
                        let xr = &xv[r * ci..(r + 1) * ci];
                        for (o, &go) in grow.iter().enumerate() {
                            let gwr = &mut gw[o * ci..(o + 1) * ci];
                            gwr.iter_mut().zip(xr).for_each(|(d, s)| *d += go * s);
                        }
                    }
                });
            }
            Op::Slice { src, start } => {
                let c = self.value(*src).channels();
                let width = node.value.channels();
                self.accumulate(grads, *src, |gs| {
                    for (row, grow) in gs.chunks_mut(c).zip(g.chunks(width)) {
                        row[*start..*start + width]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(d, s)| *d += s);
                    }
                });
            }
            Op::Concat(parts) => {
                let total = node.value.channels();
                let mut offset = 0;
                for p in parts {
                    let width = self.value(*p).channels();
                    self.accumulate(grads, *p, |gp| {
                        for (row, grow) in gp.chunks_mut(width).zip(g.chunks(total)) {
                            row.iter_mut()
                                .zip(&grow[offset..offset + width])
                                .for_each(|(d, s)| *d += s);
                        }
                    });
                    offset += width;
                }
            }
            Op::Reduce { src, kind, reduced } => {
                let shape = self.shape(*src);
                let map = reduce_index_map(shape, reduced);
                let scale = match kind {
                    Reduction::Sum => 1.0,
                    Reduction::Mean => node.value.len() as f64 / map.len() as f64,
                };
                self.accumulate(grads, *src, |gs| {
                    for (d, &o) in gs.iter_mut().zip(&map) {
                        *d += g[o] * scale;
                    }
                });
            }
            Op::Squeeze(src) => {
                let full = self.shape(*src).to_vec();
                let back = squeeze_data(g, &full, true);
                self.accumulate(grads, *src, |gs| {
                    gs.iter_mut().zip(&back).for_each(|(d, s)| *d += s);
                });
            }
            Op::Unsqueeze(src) => {
                let full = node.value.shape().to_vec();
                let back = squeeze_data(g, &full, false);
                self.accumulate(grads, *src, |gs| {
                    gs.iter_mut().zip(&back).for_each(|(d, s)| *d += s);
                });
            }
            Op::ExpandSpatial(src) => {
                let c = self.value(*src).channels();
                let s = node.value.shape();
                let hw = s[1] * s[2];
                self.accumulate(grads, *src, |gs| {
                    for (row, block) in gs.chunks_mut(c).zip(g.chunks(hw * c)) {
                        for grow in block.chunks(c) {
                            row.iter_mut().zip(grow).for_each(|(d, s)| *d += s);
                        }
                    }
                });
            }
            Op::LogAbsDet(w) => {
                let wt = self.value(*w);
                let inv_t = Lu::factor(wt)?.inverse().transpose();
                self.accumulate(grads, *w, |gw| {
                    gw.iter_mut()
                        .zip(inv_t.data())
                        .for_each(|(d, s)| *d += g[0] * s);
                });
            }
            Op::Reshape(src) => {
                self.accumulate(grads, *src, |gs| {
                    gs.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                });
            }
        }
        Ok(())
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Visits every (output position, input position, kernel tap) triple of a
/// same-padded convolution. Positions are flat `n·H·W + y·W + x` indices.
#[inline]
fn for_each_tap(
    n: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    mut f: impl FnMut(usize, usize, usize),
) {
    let (py, px) = (kh / 2, kw / 2);
    for b in 0..n {
        for oy in 0..h {
            for ox in 0..w {
                let opos = (b * h + oy) * w + ox;
                for ky in 0..kh {
                    let iy = oy + ky;
                    if iy < py || iy - py >= h {
                        continue;
                    }
                    let iy = iy - py;
                    for kx in 0..kw {
                        let ix = ox + kx;
                        if ix < px || ix - px >= w {
                            continue;
                        }
                        let ix = ix - px;
                        f(opos, (b * h + iy) * w + ix, ky * kw + kx);
                    }
                }
            }
        }
    }
}

/// For each flat input index, the flat output index it reduces into.
fn reduce_index_map(shape: &[usize], reduced: &[bool]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let mut out_strides = vec![0usize; shape.len()];
    let mut stride = 1;
    for a in (0..shape.len()).rev() {
        if !reduced[a] {
            out_strides[a] = stride;
            stride *= shape[a];
        }
    }
    let mut idx = vec![0usize; shape.len()];
    let mut map = Vec::with_capacity(n);
    for _ in 0..n {
        map.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
        for a in (0..shape.len()).rev() {
            idx[a] += 1;
            if idx[a] < shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    map
}

/// Moves data between the `[N, H, W, C]` layout `full` and its squeezed
/// `[N, H/2, W/2, 4C]` layout. With `invert` the input is squeezed.
pub(crate) fn squeeze_data(src: &[f64], full: &[usize], invert: bool) -> Vec<f64> {
    let (n, h, w, c) = (full[0], full[1], full[2], full[3]);
    let mut out = vec![0.0; src.len()];
    let (h2, w2) = (h / 2, w / 2);
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let a = ((b * h + y) * w + x) * c + ch;
                    let sq = ((b * h2 + y / 2) * w2 + x / 2) * (4 * c) + ch * 4 + 2 * (y % 2) + (x % 2);
                    if invert {
                        out[a] = src[sq];
                    } else {
                        out[sq] = src[a];
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn hadamard_and_exp() {
        let mut g = Graph::new();
        let a = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let b = g.constant(t(&[3], &[4.0, 5.0, 6.0]));
        let m = g.mul(a, b).unwrap();
        assert_eq!(g.value(m).data(), &[4.0, 10.0, 18.0]);
        let z = g.constant(Tensor::zeros(&[2]));
        let e = g.exp(z).unwrap();
        assert_eq!(g.value(e).data(), &[1.0, 1.0]);
    }

    #[test]
    fn elementwise_checks_arity() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones(&[2]));
        assert!(g.elementwise(Elementwise::Add, a, None).is_err());
        assert!(g.elementwise(Elementwise::Exp, a, Some(a)).is_err());
        assert!(g.elementwise(Elementwise::Tanh, a, None).is_ok());
    }

    #[test]
    fn domain_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 0.0]));
        match g.log(a) {
            Err(Error::Domain { op, .. }) => assert_eq!(op, "log"),
            other => panic!("{other:?}"),
        }
        let one = g.constant(Tensor::ones(&[2]));
        match g.div(one, a) {
            Err(Error::Domain { op, .. }) => assert_eq!(op, "div"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_is_contract_violation() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones(&[2, 3]));
        let b = g.constant(Tensor::ones(&[2]));
        assert!(matches!(g.add(a, b), Err(Error::Contract { .. })));
        let c = g.constant(Tensor::ones(&[3]));
        let s = g.add(a, c).unwrap();
        assert_eq!(g.shape(s), &[2, 3]);
    }

    #[test]
    fn tanh_gradient_matches_central_difference() {
        // d/da tanh(a) at 0.5, central difference with step 1e-5.
        let h = 1e-5;
        let fd = ((0.5f64 + h).tanh() - (0.5f64 - h).tanh()) / (2.0 * h);
        assert!((fd - 0.7864).abs() < 1e-3);
        let mut g = Graph::new();
        let a = g.param(Tensor::scalar(0.5));
        let y = g.tanh(a).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert!((grads.get(a).unwrap().item() - fd).abs() < 1e-9);
    }

    #[test]
    fn linear_and_quadratic_losses() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[3]));
        let two = g.scale(x, 2.0);
        let l = g.sum(two);
        assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[2.0; 3]);

        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_nonscalar_and_repeat() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[3]));
        assert!(g.backward(x).is_err());
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert!(g.backward(l).is_err());
        let grads = g.backward_with(l, BackwardMode::Accumulate).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0; 3]);
    }

    #[test]
    fn reductions() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = g.sum(x);
        assert_eq!(g.value(s).item(), 10.0);
        let rows = g.reduce(Reduction::Sum, x, Some(&[1])).unwrap();
        assert_eq!(g.value(rows).data(), &[3.0, 7.0]);
        assert!(g.reduce(Reduction::Sum, x, Some(&[2])).is_err());
        let v = g.constant(t(&[2], &[2.0, 4.0]));
        let m = g.mean(v);
        assert_eq!(g.value(m).item(), 3.0);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2, 3, 4]));
        let m = g.reduce(Reduction::Mean, x, Some(&[0, 2])).unwrap();
        let l = g.sum(m);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| (v - 0.125).abs() < 1e-15));
    }

    #[test]
    fn split_concat_round_trip() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64 * 0.37 - 1.0));
        let parts = g.channel_split(x, &[2, 2]).unwrap();
        let back = g.concat(&parts).unwrap();
        assert_eq!(g.value(back), g.value(x));

        let y = g.constant(Tensor::ones(&[1, 6]));
        let three = g.channel_split(y, &[2, 2, 2]).unwrap();
        assert!(three.iter().all(|p| g.shape(*p) == [1, 2]));
        assert!(g.channel_split(x, &[3, 2]).is_err());
    }

    #[test]
    fn conv_identity_and_zero_kernels() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 3, 3, 2], |i| i as f64));
        let eye = g.constant(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zb = g.constant(Tensor::zeros(&[2]));
        let y = g.conv2d(x, eye, zb).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let zk = g.constant(Tensor::zeros(&[3, 3, 2, 3]));
        let b = g.constant(t(&[3], &[0.5, -1.0, 2.0]));
        let y = g.conv2d(x, zk, b).unwrap();
        for px in g.value(y).data().chunks(3) {
            assert_eq!(px, &[0.5, -1.0, 2.0]);
        }
        let bad = g.constant(Tensor::zeros(&[3, 3, 3, 3]));
        assert!(g.conv2d(x, bad, b).is_err());
    }

    #[test]
    fn squeeze_layout() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 4, 4, 1], |i| i as f64));
        let s = g.squeeze2x2(x).unwrap();
        assert_eq!(g.shape(s), &[1, 2, 2, 4]);
        assert_eq!(&g.value(s).data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        let u = g.unsqueeze2x2(s).unwrap();
        assert_eq!(g.value(u), g.value(x));
        let odd = g.constant(Tensor::zeros(&[1, 3, 4, 1]));
        assert!(g.squeeze2x2(odd).is_err());
    }
}
