//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every op appends one node in topological order; `backward` walks the
//! tape once in reverse. Nodes that do not depend on any `param` leaf carry
//! no gradient and their backward rules are skipped.

use super::tensor::{axis_split, gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Value used by [`Graph::masked_fill`] callers for "minus infinity": finite,
/// but `exp` of it underflows to exactly zero.
pub const NEG_LARGE: f64 = -1e30;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Gather { table: Var, indices: Vec<usize> },
    Sum(Var),
    SumAxis { x: Var, axis: usize },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Gelu(Var),
    MaskedFill { x: Var, mask: Vec<bool> },
    CrossEntropy { logits: Var, targets: Vec<usize>, ignore: usize, probs: Vec<f64>, count: usize },
    StopGradient,
    Dropout { x: Var, keep: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Deliberate backward-rule corruption, used only by the gradient checker's
/// negative control.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BackwardFault {
    None,
    /// Multiplies the left-operand gradient of every matmul by this factor.
    MatMulScale(f64),
}

/// The tape. One graph per forward pass; not shared across threads.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: BackwardFault,
    /// Values every `stop_gradient` produced, in creation order.
    stops: Vec<Tensor>,
    /// When set, `stop_gradient` replays these values instead of copying its input.
    frozen_stops: Option<Vec<Tensor>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Map from nodes to dLoss/dnode produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; exactly zero when `v` is not on a path to the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(t) => t,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// True when some gradient flowed into `v`.
    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    let lead = b.iter().take_while(|&&d| d == 1).count();
    let tail = &b[lead..];
    tail.len() <= a.len() && a[a.len() - tail.len()..] == *tail
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            fault: BackwardFault::None,
            stops: Vec::new(),
            frozen_stops: None,
        }
    }

    /// A tape whose stop-gradient outputs replay `stops` (as recorded by
    /// [`Graph::stop_values`] on another tape), so the forward value is a
    /// function of the parameters only through differentiable paths.
    pub fn with_frozen_stops(stops: Vec<Tensor>) -> Self {
        Graph {
            frozen_stops: Some(stops),
            ..Graph::new()
        }
    }

    pub fn stop_values(&self) -> &[Tensor] {
        &self.stops
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: BackwardFault) {
        self.fault = fault;
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

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !broadcastable(av.shape(), bv.shape()) {
            return Err(Error::dim(op, av.shape(), bv.shape()));
        }
        let bn = bv.numel();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data()[i % bn]))
            .collect();
        Ok(Tensor::from_parts(av.shape().to_vec(), data))
    }

    /// Elementwise `a + b`; `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.nodes[a.0].value.map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// `[n,k] × [k,m] → [n,m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::dim("matmul", av.shape(), bv.shape()));
        }
        let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; n * m];
        gemm_nn(av.data(), bv.data(), &mut out, n, k, m);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.shape().len() != 2 {
            return Err(Error::dim("transpose", av.shape(), &[2]));
        }
        let out = transpose2(av);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::range("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let same_rank = s.len() == base.len();
            if !same_rank || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = &self.nodes[v.0].value;
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::range("slice", format!("axis {axis} for rank {}", s.len())));
        }
        if len == 0 || start + len > s[axis] {
            return Err(Error::range("slice", format!("{start}..{} of {}", start + len, s[axis])));
        }
        let (outer, alen, inner) = axis_split(&s, axis);
        let src = self.nodes[x.0].value.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * alen * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Slice { x, axis, start }, rg))
    }

    /// Rows of a 2-D `table` selected by `indices`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = &self.nodes[table.0].value;
        if t.shape().len() != 2 {
            return Err(Error::dim("gather", t.shape(), &[2]));
        }
        if indices.is_empty() {
            return Err(Error::range("gather", "empty index list"));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::range("gather", format!("index {i} >= {rows}")));
            }
            data.extend_from_slice(t.row(i));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![indices.len(), cols], data),
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::range("sum_axis", format!("axis {axis} for rank {}", s.len())));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let src = self.nodes[x.0].value.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += src[(o * len + l) * inner + i];
                }
            }
        }
        let mut shape = s;
        shape[axis] = 1;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::SumAxis { x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::range("mean_axis", format!("axis {axis}")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    fn softmax_like(&self, x: Var, axis: usize, op: &'static str, log: bool) -> Result<Tensor> {
        let t = &self.nodes[x.0].value;
        if axis >= t.shape().len() {
            return Err(Error::range(op, format!("axis {axis} for rank {}", t.shape().len())));
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| src[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..len).map(|l| (src[idx(l)] - max).exp()).sum();
                let lz = z.ln();
                for l in 0..len {
                    out[idx(l)] = if log {
                        src[idx(l)] - max - lz
                    } else {
                        (src[idx(l)] - max).exp() / z
                    };
                }
            }
        }
        Ok(Tensor::from_parts(t.shape().to_vec(), out))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.softmax_like(x, axis, "softmax", false)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.softmax_like(x, axis, "log_softmax", true)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::LogSoftmax { x, axis }, rg))
    }

    /// Normalizes over the last axis (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let t = &self.nodes[x.0].value;
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = vec![0.0; t.numel()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            for c in 0..cols {
                out[r * cols + c] = (row[c] - mean) * is;
            }
            inv_std.push(is);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        self.push(out, Op::LayerNorm { x, inv_std }, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(|v| gelu_fwd(v).0);
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Replaces entries where `mask` is true with `value`; those entries get
    /// zero gradient.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if mask.len() != t.numel() {
            return Err(Error::dim("masked_fill", t.shape(), &[mask.len()]));
        }
        let data = t
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::MaskedFill {
                x,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// Mean token cross-entropy of `logits[T,V]` against `targets`, skipping
    /// positions equal to `ignore`. Returns 0 when every position is ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let t = &self.nodes[logits.0].value;
        if t.shape().len() != 2 || t.shape()[0] != targets.len() {
            return Err(Error::dim("cross_entropy", t.shape(), &[targets.len()]));
        }
        let (rows, v) = (t.shape()[0], t.shape()[1]);
        let mut probs = vec![0.0; rows * v];
        let mut loss = 0.0;
        let mut count = 0;
        for (r, &tgt) in targets.iter().enumerate() {
            let row = t.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            for c in 0..v {
                probs[r * v + c] = (row[c] - max).exp() / z;
            }
            if tgt == ignore {
                continue;
            }
            if tgt >= v {
                return Err(Error::range("cross_entropy", format!("target {tgt} >= vocab {v}")));
            }
            loss += -(row[tgt] - max - z.ln());
            count += 1;
        }
        let value = if count > 0 { loss / count as f64 } else { 0.0 };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Identity forward, zero gradient backward.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let k = self.stops.len();
        let out = match self.frozen_stops.as_ref().and_then(|f| f.get(k)) {
            Some(t) if t.shape() == self.nodes[x.0].value.shape() => t.clone(),
            _ => self.nodes[x.0].value.clone(),
        };
        self.stops.push(out.clone());
        self.push(out, Op::StopGradient, false)
    }

    /// Inverted dropout with a caller-supplied keep mask (already sampled).
    pub fn dropout(&mut self, x: Var, keep: &[bool], rate: f64) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if keep.len() != t.numel() {
            return Err(Error::dim("dropout", t.shape(), &[keep.len()]));
        }
        let s = 1.0 / (1.0 - rate);
        let keep: Vec<f64> = keep.iter().map(|&k| if k { s } else { 0.0 }).collect();
        let data = t.data().iter().zip(&keep).map(|(a, b)| a * b).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Dropout { x, keep }, rg))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(lv.shape()));
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.backprop_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Sums a full-shape gradient down to the (broadcast) shape of `b`.
    fn reduce_to(&self, g: Vec<f64>, b: Var) -> Tensor {
        let bs = self.shape(b).to_vec();
        let bn: usize = bs.iter().product();
        if bn == g.len() {
            return Tensor::from_parts(bs, g);
        }
        let mut out = vec![0.0; bn];
        for (i, v) in g.iter().enumerate() {
            out[i % bn] += v;
        }
        Tensor::from_parts(bs, out)
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    let gb = self.reduce_to(gd.to_vec(), *b);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    let gb = self.reduce_to(gd.iter().map(|x| -x).collect(), *b);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let bn = bv.numel();
                if self.requires_grad(*a) {
                    let ga = gd.iter().enumerate().map(|(i, x)| x * bv.data()[i % bn]).collect();
                    self.acc(grads, *a, Tensor::from_parts(av.shape().to_vec(), ga));
                }
                if self.requires_grad(*b) {
                    let gb = gd.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    let gb = self.reduce_to(gb, *b);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.map(|x| x * c)),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; n * k];
                    gemm_nt(gd, bv.data(), &mut ga, n, m, k);
                    if let BackwardFault::MatMulScale(f) = self.fault {
                        ga.iter_mut().for_each(|x| *x *= f);
                    }
                    self.acc(grads, *a, Tensor::from_parts(vec![n, k], ga));
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * m];
                    gemm_tn(av.data(), gd, &mut gb, n, k, m);
                    self.acc(grads, *b, Tensor::from_parts(vec![k, m], gb));
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, transpose2(g)),
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let s = self.shape(*v).to_vec();
                    let len = s[*axis];
                    if self.requires_grad(*v) {
                        let mut part = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            part.extend_from_slice(&gd[base..base + len * inner]);
                        }
                        self.acc(grads, *v, Tensor::from_parts(s, part));
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let s = self.shape(*x).to_vec();
                let (outer, alen, inner) = axis_split(&s, *axis);
                let len = node.value.shape()[*axis];
                let mut full = vec![0.0; outer * alen * inner];
                for o in 0..outer {
                    let dst = o * alen * inner + start * inner;
                    let src = o * len * inner;
                    full[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                self.acc(grads, *x, Tensor::from_parts(s, full));
            }
            Op::Gather { table, indices } => {
                let s = self.shape(*table).to_vec();
                let cols = s[1];
                let mut full = vec![0.0; s[0] * cols];
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..cols {
                        full[i * cols + c] += gd[r * cols + c];
                    }
                }
                self.acc(grads, *table, Tensor::from_parts(s, full));
            }
            Op::Sum(x) => {
                let s = self.shape(*x);
                self.acc(grads, *x, Tensor::full(s, gd[0]));
            }
            Op::SumAxis { x, axis } => {
                let s = self.shape(*x).to_vec();
                let (outer, len, inner) = axis_split(&s, *axis);
                let mut full = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            full[(o * len + l) * inner + i] = gd[o * inner + i];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_parts(s, full));
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| gd[idx(l)] * y[idx(l)]).sum();
                        for l in 0..len {
                            gx[idx(l)] = y[idx(l)] * (gd[idx(l)] - dot);
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_parts(node.value.shape().to_vec(), gx));
            }
            Op::LogSoftmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let total: f64 = (0..len).map(|l| gd[idx(l)]).sum();
                        for l in 0..len {
                            gx[idx(l)] = gd[idx(l)] - y[idx(l)].exp() * total;
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_parts(node.value.shape().to_vec(), gx));
            }
            Op::LayerNorm { x, inv_std } => {
                let xhat = &node.value;
                let (rows, cols) = (xhat.rows(), xhat.cols());
                let mut gx = vec![0.0; xhat.numel()];
                for r in 0..rows {
                    let xh = xhat.row(r);
                    let gr = &gd[r * cols..(r + 1) * cols];
                    let mean_g = gr.iter().sum::<f64>() / cols as f64;
                    let mean_gx = gr.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for c in 0..cols {
                        gx[r * cols + c] = inv_std[r] * (gr[c] - mean_g - xh[c] * mean_gx);
                    }
                }
                self.acc(grads, *x, Tensor::from_parts(xhat.shape().to_vec(), gx));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let gx = xv.data().iter().zip(gd).map(|(&v, &gv)| gv * gelu_fwd(v).1).collect();
                self.acc(grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
            }
            Op::MaskedFill { x, mask } => {
                let gx = gd.iter().zip(mask).map(|(&v, &m)| if m { 0.0 } else { v }).collect();
                self.acc(grads, *x, Tensor::from_parts(node.value.shape().to_vec(), gx));
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                if *count == 0 {
                    return Ok(());
                }
                let s = self.shape(*logits).to_vec();
                let v = s[1];
                let scale = gd[0] / *count as f64;
                let mut gx = vec![0.0; probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    if t == *ignore {
                        continue;
                    }
                    for c in 0..v {
                        gx[r * v + c] = probs[r * v + c] * scale;
                    }
                    gx[r * v + t] -= scale;
                }
                self.acc(grads, *logits, Tensor::from_parts(s, gx));
            }
            Op::Dropout { x, keep } => {
                let gx = gd.iter().zip(keep).map(|(a, b)| a * b).collect();
                self.acc(grads, *x, Tensor::from_parts(node.value.shape().to_vec(), gx));
            }
        }
        Ok(())
    }
}

fn transpose2(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let src = t.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Tensor::from_parts(vec![c, r], out)
}

/// Returns (gelu(x), d gelu / dx) for the tanh approximation.
pub(crate) fn gelu_fwd(x: f64) -> (f64, f64) {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let inner = K * (x + A * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dinner = K * (1.0 + 3.0 * A * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}
