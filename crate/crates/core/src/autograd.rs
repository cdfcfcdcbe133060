//! Reverse-mode differentiation over a recorded tape.
//!
//! A [`Graph`] owns every value produced during one forward trace. Operations
//! append nodes in execution order, so the node list is already topologically
//! sorted and [`Graph::backward`] only has to walk it in reverse. A graph runs
//! backward once; after that the tape is closed and rejects new work.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{numel, split_axis, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Target sentinel for rows that take no part in a cross-entropy loss.
pub const IGNORE_INDEX: usize = usize::MAX;

/// An operation defined outside this module, with its own backward rule.
pub trait CustomOp {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// One gradient per input, each with the input's element count.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    Linear(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Silu(Var),
    Sum(Var),
    Mean(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore_index: Option<usize>,
        probs: Vec<f64>,
        count: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        axis: usize,
        kernel: usize,
        stride: usize,
    },
    RmsNorm {
        x: Var,
        weight: Var,
        inv_rms: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    closed: bool,
}

fn pool_out_len(len: usize, kernel: usize, stride: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::InvalidArgument(alloc::format!(
            "pooling kernel ({kernel}) and stride ({stride}) must be >= 1"
        )));
    }
    if len < kernel {
        return Err(Error::Window { kernel, len });
    }
    Ok((len - kernel) / stride + 1)
}

/// Output length of a 1-D pooling window: `floor((len - kernel) / stride) + 1`.
pub fn pooled_len(len: usize, kernel: usize, stride: usize) -> Result<usize> {
    pool_out_len(len, kernel, stride)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
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

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Gradient of a leaf after [`Graph::backward`]; `None` for frozen leaves.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].value.take_grad()
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.closed {
            return Err(Error::TapeClosed);
        }
        value.set_requires_grad(requires_grad);
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    /// Records a leaf; it participates in backward iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Adds `bias` (shape `[n]`) to every trailing-dimension row of `x` (`[.., n]`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tb.numel();
        if tb.rank() != 1 || tx.shape().last() != Some(&n) {
            return Err(shape_err("add_bias", tx.shape(), tb.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (d, b) in row.iter_mut().zip(tb.data()) {
                *d += b;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x, bias]);
        self.push(out, Op::AddBias(x, bias), rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, factor), rg)
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut data = vec![0.0; m * n];
        let (ad, bd) = (ta.data(), tb.data());
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                for (c, bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *c += aip * bv;
                }
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Matmul(a, b), rg)
    }

    /// `x · wᵀ` with `x: [m, k]` and `w: [n, k]` (weights stored `[out, in]`).
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 2 || tw.rank() != 2 || tx.shape()[1] != tw.shape()[1] {
            return Err(shape_err("linear", tx.shape(), tw.shape()));
        }
        let (m, k, n) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
        let mut data = vec![0.0; m * n];
        let (xd, wd) = (tx.data(), tw.data());
        for i in 0..m {
            let xr = &xd[i * k..(i + 1) * k];
            for j in 0..n {
                data[i * n + j] = dot(xr, &wd[j * k..(j + 1) * k]);
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        let rg = self.any_grad(&[x, w]);
        self.push(out, Op::Linear(x, w), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(shape_err("transpose", tx.shape(), &[]));
        }
        let (m, n) = (tx.shape()[0], tx.shape()[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = tx.data()[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Transpose(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Flattens all but the first axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape();
        let lead = shape.first().copied().unwrap_or(1);
        let rest = numel(shape.get(1..).unwrap_or(&[]));
        self.reshape(x, &[lead, rest])
    }

    /// Gathers rows `ids` of a `[rows, d]` table into `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(shape_err("gather", tt.shape(), &[]));
        }
        let (rows, d) = (tt.shape()[0], tt.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::TokenOutOfRange { id, vocab: rows });
            }
            data.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.any_grad(&[table]);
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v * sigmoid(v)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Silu(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.numel() == 0 {
            return Err(Error::Empty);
        }
        let s = tx.data().iter().sum::<f64>() / tx.numel() as f64;
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Softmax along `axis`, max-shifted for stability.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let (outer, len, inner) = split_axis(tx.shape(), axis)?;
        let mut data = tx.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(data[idx(j)]);
                }
                let mut total = 0.0;
                for j in 0..len {
                    let e = libm::exp(data[idx(j)] - max);
                    data[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    data[idx(j)] /= total;
                }
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Softmax { x, axis }, rg)
    }

    /// Mean over non-ignored rows of `-log softmax(logits)[target]`.
    ///
    /// `logits` is `[.., C]`; `targets` holds one class index per row. Rows whose
    /// target equals `ignore_index` contribute nothing.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_index: Option<usize>,
    ) -> Result<Var> {
        let tl = self.value(logits);
        let classes = *tl
            .shape()
            .last()
            .ok_or_else(|| shape_err("cross_entropy", tl.shape(), &[]))?;
        let rows = tl.numel() / classes.max(1);
        if targets.len() != rows {
            return Err(shape_err("cross_entropy", tl.shape(), &[targets.len()]));
        }
        let mut probs = vec![0.0; tl.numel()];
        let mut total = 0.0;
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            if Some(t) == ignore_index {
                continue;
            }
            if t >= classes {
                return Err(Error::TargetOutOfRange { target: t, classes });
            }
            let row = &tl.data()[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &v) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = libm::exp(v - max);
                z += *p;
            }
            for p in probs[r * classes..(r + 1) * classes].iter_mut() {
                *p /= z;
            }
            total += max + libm::log(z) - row[t];
            count += 1;
        }
        if count == 0 {
            return Err(Error::AllIgnored);
        }
        let out = Tensor::scalar(total / count as f64);
        let rg = self.any_grad(&[logits]);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_index,
                probs,
                count,
            },
            rg,
        )
    }

    /// Window maximum along `axis`; gradient goes to the first maximal position.
    pub fn max_pool_1d(&mut self, x: Var, axis: usize, kernel: usize, stride: usize) -> Result<Var> {
        let tx = self.value(x);
        let (outer, len, inner) = split_axis(tx.shape(), axis)?;
        let out_len = pool_out_len(len, kernel, stride)?;
        let mut data = Vec::with_capacity(outer * out_len * inner);
        let mut argmax = Vec::with_capacity(outer * out_len * inner);
        let xd = tx.data();
        for o in 0..outer {
            for j in 0..out_len {
                for i in 0..inner {
                    let mut best = (o * len + j * stride) * inner + i;
                    for p in 1..kernel {
                        let idx = (o * len + j * stride + p) * inner + i;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    data.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        shape[axis] = out_len;
        let out = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[x]);
        self.push(out, Op::MaxPool { x, argmax }, rg)
    }

    /// Window mean along `axis`.
    pub fn avg_pool_1d(&mut self, x: Var, axis: usize, kernel: usize, stride: usize) -> Result<Var> {
        let tx = self.value(x);
        let (outer, len, inner) = split_axis(tx.shape(), axis)?;
        let out_len = pool_out_len(len, kernel, stride)?;
        let mut data = Vec::with_capacity(outer * out_len * inner);
        let xd = tx.data();
        for o in 0..outer {
            for j in 0..out_len {
                for i in 0..inner {
                    let mut s = 0.0;
                    for p in 0..kernel {
                        s += xd[(o * len + j * stride + p) * inner + i];
                    }
                    data.push(s / kernel as f64);
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        shape[axis] = out_len;
        let out = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[x]);
        self.push(
            out,
            Op::AvgPool {
                x,
                axis,
                kernel,
                stride,
            },
            rg,
        )
    }

    /// `x / sqrt(mean(x²) + eps) ⊙ weight` over the trailing dimension.
    pub fn rms_norm(&mut self, x: Var, weight: Var, eps: f64) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(weight));
        let d = tw.numel();
        if tw.rank() != 1 || tx.shape().last() != Some(&d) {
            return Err(shape_err("rms_norm", tx.shape(), tw.shape()));
        }
        let rows = tx.numel() / d;
        let mut data = vec![0.0; tx.numel()];
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let xr = &tx.data()[r * d..(r + 1) * d];
            let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / libm::sqrt(ms + eps);
            for ((o, &xv), &wv) in data[r * d..(r + 1) * d].iter_mut().zip(xr).zip(tw.data()) {
                *o = xv * inv * wv;
            }
            inv_rms.push(inv);
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x, weight]);
        self.push(out, Op::RmsNorm { x, weight, inv_rms }, rg)
    }

    /// Multi-head causal self-attention over `[batch·seq, d]` projections.
    ///
    /// Position `i` attends to positions `0..=i` of its own sequence only, so
    /// its output is computed from exactly the same operands whatever follows.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() {
            return Err(shape_err("causal_attention", tq.shape(), tk.shape()));
        }
        if tq.rank() != 2 || tq.shape()[0] != batch * seq || heads == 0 || tq.shape()[1] % heads != 0 {
            return Err(shape_err("causal_attention", tq.shape(), &[batch * seq, heads]));
        }
        let d = tq.shape()[1];
        let hd = d / heads;
        let scale = 1.0 / libm::sqrt(hd as f64);
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut out = vec![0.0; batch * seq * d];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + h * hd..][..hd];
                    let pr = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &kd[(b * seq + j) * d + h * hd..][..hd];
                        pr[j] = dot(qi, kj) * scale;
                        max = max.max(pr[j]);
                    }
                    let mut z = 0.0;
                    for p in pr[..=i].iter_mut() {
                        *p = libm::exp(*p - max);
                        z += *p;
                    }
                    let o = &mut out[(b * seq + i) * d + h * hd..][..hd];
                    for j in 0..=i {
                        pr[j] /= z;
                        let vj = &vd[(b * seq + j) * d + h * hd..][..hd];
                        for (ov, vv) in o.iter_mut().zip(vj) {
                            *ov += pr[j] * vv;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![batch * seq, d], out)?;
        let rg = self.any_grad(&[q, k, v]);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            rg,
        )
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = op.forward(&values)?;
        let rg = self.any_grad(inputs);
        self.push(
            out,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Accumulates `d loss / d leaf` into every leaf that requires grad, then
    /// closes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.closed {
            return Err(Error::TapeClosed);
        }
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let tracked = self.requires_grad(loss);
        self.closed = true;
        if !tracked {
            return Ok(());
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.value.requires_grad() {
                continue;
            }
            let nodes = &self.nodes;
            match &node.op {
                Op::Leaf => leaf_grads.push((i, g)),
                Op::Add(a, b) => {
                    for v in [a, b] {
                        if let Some(s) = slot(&mut grads, nodes, *v) {
                            axpy(s, 1.0, &g);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        for ((s, g), y) in s.iter_mut().zip(&g).zip(bd) {
                            *s += g * y;
                        }
                    }
                    if let Some(s) = slot(&mut grads, nodes, *b) {
                        for ((s, g), x) in s.iter_mut().zip(&g).zip(ad) {
                            *s += g * x;
                        }
                    }
                }
                Op::AddBias(x, bias) => {
                    if let Some(s) = slot(&mut grads, nodes, *x) {
                        axpy(s, 1.0, &g);
                    }
                    if let Some(s) = slot(&mut grads, nodes, *bias) {
                        let width = s.len();
                        for row in g.chunks(width) {
                            axpy(s, 1.0, row);
                        }
                    }
                }
                Op::Scale(x, f) => {
                    if let Some(s) = slot(&mut grads, nodes, *x) {
                        axpy(s, *f, &g);
                    }
                }
                Op::Matmul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    let (ad, bd) = (ta.data(), tb.data());
                    if let Some(s) = slot(&mut grads, nodes, *a) {
                        for i in 0..m {
                            let gi = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                s[i * k + p] += dot(gi, &bd[p * n..(p + 1) * n]);
                            }
                        }
                    }
                    if let Some(s) = slot(&mut grads, nodes, *b) {
                        for i in 0..m {
                            let gi = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                axpy(&mut s[p * n..(p + 1) * n], ad[i * k + p], gi);
                            }
                        }
                    }
                }
                Op::Linear(x, w) => {
                    let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
                    let (m, k, n) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
                    let (xd, wd) = (tx.data(), tw.data());
                    if let Some(s) = slot(&mut grads, nodes, *x) {
                        for i in 0..m {
                            let si = &mut s[i * k..(i + 1) * k];
                            for j in 0..n {
                                axpy(si, g[i * n + j], &wd[j * k..(j + 1) * k]);
                            }
                        }
                    }
                    if let Some(s) = slot(&mut grads, nodes, *w) {
                        for i in 0..m {
                            let xi = &xd[i * k..(i + 1) * k];
                            for j in 0..n {
                                axpy(&mut s[j * k..(j + 1) * k], g[i * n + j], xi);
                            }
                        }
                    }
                }
                Op::Transpose(x) => {
                    if let Some(s) = slot(&mut grads, nodes, *x) {
                        let shape = nodes[x.0].value.shape();
                        let (m, n) = (shape[0], shape[1]);
                        for i in 0..m {
                            for j in 0..n {
                                s[i * n + j] += g[j * m + i];
                            }
                        }
                    }
                }
                Op::Reshape(x) => {
                    if let Some(s) = slot(&mut grads, nodes, *x) {
                        axpy(s, 1.0, &g);
                    }
                }
                Op::Gather { table, ids } => {
                    if let Some(s) = slot(&mut grads, nodes, *table) {
                        let d = nodes[table.0].value.shape()[1];
                        for (r, &id) in ids.iter().enumerate() {
                            axpy(&mut s[id * d..(id + 1) * d], 1.0, &g[r * d..(r + 1) * d]);
                        }
                    }
                }
                Op::Silu(x) => {
                    let xd = nodes[x.0].value.data();
                    if let Some(s) = slot(&mut grads, nodes, *x) {
                        for ((s, g), &v) in s.iter_mut().zip(&g).zip(xd) {
                            let sg = sigmoid(v);
                            *s += g * sg * (1.0 + v * (1.0 - sg));
                        }
                    }
                }
                Op::Sum(x) => {
                    if let Some(s) = slot(&mut grads, nodes, *x) {
                        s.iter_mut().for_each(|s| *s += g[0]);
                    }
                }
                Op::Mean(x) => {
                    if let Some(s) = slot(&mut grads, nodes, *x) {
                        let gm = g[0] / s.len() as f64;
                        s.iter_mut().for_each(|s| *s += gm);
                    }
                }
                Op::Softmax { x, axis } => {
                    let y = node.value.data();
                    let (outer, len, inner) = split_axis(node.value.shape(), *axis)?;
                    if let Some(s) = slot(&mut grads, nodes, *x) {
                        for o in 0..outer {
                            for i in 0..inner {
                                let idx = |j: usize| (o * len + j) * inner + i;
                                let inner_sum: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                                for j in 0..len {
                                    s[idx(j)] += y[idx(j)] * (g[idx(j)] - inner_sum);
                                }
                            }
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    ignore_index,
                    probs,
                    count,
                } => {
                    if let Some(s) = slot(&mut grads, nodes, *logits) {
                        let classes = probs.len() / targets.len();
                        let gs = g[0] / *count as f64;
                        for (r, &t) in targets.iter().enumerate() {
                            if Some(t) == *ignore_index {
                                continue;
                            }
                            let row = &mut s[r * classes..(r + 1) * classes];
                            axpy(row, gs, &probs[r * classes..(r + 1) * classes]);
                            row[t] -= gs;
                        }
                    }
                }
                Op::MaxPool { x, argmax } => {
                    if let Some(s) = slot(&mut grads, nodes, *x) {
                        for (gv, &idx) in g.iter().zip(argmax) {
                            s[idx] += gv;
                        }
                    }
                }
                Op::AvgPool {
                    x,
                    axis,
                    kernel,
                    stride,
                } => {
                    let in_shape = nodes[x.0].value.shape();
                    let (outer, len, inner) = split_axis(in_shape, *axis)?;
                    let out_len = node.value.shape()[*axis];
                    if let Some(s) = slot(&mut grads, nodes, *x) {
                        let kf = *kernel as f64;
                        for o in 0..outer {
                            for j in 0..out_len {
                                for i in 0..inner {
                                    let gv = g[(o * out_len + j) * inner + i] / kf;
                                    for p in 0..*kernel {
                                        s[(o * len + j * stride + p) * inner + i] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::RmsNorm { x, weight, inv_rms } => {
                    let (tx, tw) = (&nodes[x.0].value, &nodes[weight.0].value);
                    let d = tw.numel();
                    let (xd, wd) = (tx.data(), tw.data());
                    let want_x = nodes[x.0].value.requires_grad();
                    let mut gx = if want_x { vec![0.0; xd.len()] } else { Vec::new() };
                    let mut gw = vec![0.0; d];
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let xr = &xd[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut proj = 0.0;
                        for p in 0..d {
                            let xhat = xr[p] * inv;
                            gw[p] += gr[p] * xhat;
                            proj += gr[p] * wd[p] * xhat;
                        }
                        if want_x {
                            proj /= d as f64;
                            for p in 0..d {
                                gx[r * d + p] = inv * (gr[p] * wd[p] - xr[p] * inv * proj);
                            }
                        }
                    }
                    if let Some(s) = slot(&mut grads, nodes, *x) {
                        axpy(s, 1.0, &gx);
                    }
                    if let Some(s) = slot(&mut grads, nodes, *weight) {
                        axpy(s, 1.0, &gw);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    batch,
                    seq,
                    heads,
                    probs,
                } => {
                    let (batch, seq, heads) = (*batch, *seq, *heads);
                    let (qd, kd, vd) = (
                        nodes[q.0].value.data(),
                        nodes[k.0].value.data(),
                        nodes[v.0].value.data(),
                    );
                    let d = nodes[q.0].value.shape()[1];
                    let hd = d / heads;
                    let scale = 1.0 / libm::sqrt(hd as f64);
                    let mut gq = vec![0.0; qd.len()];
                    let mut gk = vec![0.0; kd.len()];
                    let mut gv = vec![0.0; vd.len()];
                    let mut dscore = vec![0.0; seq];
                    for b in 0..batch {
                        for h in 0..heads {
                            for i in 0..seq {
                                let row = (b * seq + i) * d + h * hd;
                                let go = &g[row..row + hd];
                                let pr = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                                let mut weighted = 0.0;
                                for j in 0..=i {
                                    let col = (b * seq + j) * d + h * hd;
                                    let dp = dot(go, &vd[col..col + hd]);
                                    axpy(&mut gv[col..col + hd], pr[j], go);
                                    dscore[j] = dp;
                                    weighted += pr[j] * dp;
                                }
                                for j in 0..=i {
                                    let col = (b * seq + j) * d + h * hd;
                                    let ds = pr[j] * (dscore[j] - weighted) * scale;
                                    axpy(&mut gq[row..row + hd], ds, &kd[col..col + hd]);
                                    axpy(&mut gk[col..col + hd], ds, &qd[row..row + hd]);
                                }
                            }
                        }
                    }
                    for (var, gr) in [(q, gq), (k, gk), (v, gv)] {
                        if let Some(s) = slot(&mut grads, nodes, *var) {
                            axpy(s, 1.0, &gr);
                        }
                    }
                }
                Op::Custom { inputs, op } => {
                    let values: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.0].value).collect();
                    let parts = op.backward(&values, &node.value, &g);
                    for (var, gr) in inputs.iter().zip(parts) {
                        if let Some(s) = slot(&mut grads, nodes, *var) {
                            if gr.len() != s.len() {
                                return Err(shape_err("custom backward", &[s.len()], &[gr.len()]));
                            }
                            axpy(s, 1.0, &gr);
                        }
                    }
                }
            }
        }
        for (i, g) in leaf_grads {
            self.nodes[i].value.set_grad(Some(g));
        }
        Ok(())
    }
}

/// Gradient buffer for `v`, allocated on first use; `None` if `v` is frozen.
fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    let value = &nodes[v.0].value;
    if !value.requires_grad() {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; value.numel()]))
}

#[inline]
fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_cases() {
        let mut g = Graph::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let m = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0])).unwrap();
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = g.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
        let b = g.constant(t(&[2, 1], &[3.0, 4.0])).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        match g.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.constant(t(&[2], &[1000.0, 0.0])).unwrap();
        let y = g.softmax(x, 0).unwrap();
        let d = g.value(y).data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 1.0).abs() < 1e-300_f64.max(f64::EPSILON));
        assert!(d[1] < 1e-300);

        assert!(matches!(g.softmax(x, 1), Err(Error::Axis { axis: 1, rank: 1 })));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin() * 5.0).collect();
        let x = g.constant(t(&[2, 3, 4], &data)).unwrap();
        for axis in 0..3 {
            let y = g.softmax(x, axis).unwrap();
            let v = g.value(y);
            let (outer, len, inner) = split_axis(v.shape(), axis).unwrap();
            for o in 0..outer {
                for i in 0..inner {
                    let s: f64 = (0..len).map(|j| v.data()[(o * len + j) * inner + i]).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 4])).unwrap();
        let l = g.cross_entropy(x, &[2], None).unwrap();
        assert!((g.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-12);

        let x = g.constant(t(&[1, 2], &[10.0, -10.0])).unwrap();
        let l = g.cross_entropy(x, &[0], None).unwrap();
        assert!(g.value(l).item().unwrap() < 1e-4);

        assert!(matches!(
            g.cross_entropy(x, &[2], None),
            Err(Error::TargetOutOfRange { target: 2, classes: 2 })
        ));
        assert!(matches!(
            g.cross_entropy(x, &[IGNORE_INDEX], Some(IGNORE_INDEX)),
            Err(Error::AllIgnored)
        ));
    }

    #[test]
    fn cross_entropy_ignores_rows() {
        let mut g = Graph::new();
        let x = g
            .leaf(t(&[2, 2], &[1.0, 2.0, 50.0, -50.0]).with_requires_grad(true))
            .unwrap();
        let l = g.cross_entropy(x, &[1, IGNORE_INDEX], Some(IGNORE_INDEX)).unwrap();
        let expected = -(2.0 - (1f64.exp() + 2f64.exp()).ln());
        assert!((g.value(l).item().unwrap() - expected).abs() < 1e-12);
        g.backward(l).unwrap();
        let gr = g.grad(x).unwrap();
        assert_eq!(&gr[2..], &[0.0, 0.0]);
        // softmax - onehot
        let p0 = 1f64.exp() / (1f64.exp() + 2f64.exp());
        assert!((gr[0] - p0).abs() < 1e-12);
        assert!((gr[1] - (1.0 - p0 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn pooling_hand_windows() {
        let mut g = Graph::new();
        let x = g.constant(t(&[4], &[1.0, 3.0, 2.0, 5.0])).unwrap();
        let m = g.max_pool_1d(x, 0, 2, 2).unwrap();
        assert_eq!(g.value(m).data(), &[3.0, 5.0]);
        let a = g.avg_pool_1d(x, 0, 2, 2).unwrap();
        assert_eq!(g.value(a).data(), &[2.0, 3.5]);

        let c = g.constant(Tensor::full(&[2, 7], 1.5)).unwrap();
        let m = g.max_pool_1d(c, 1, 3, 2).unwrap();
        assert_eq!(g.value(m).shape(), &[2, 3]);
        assert!(g.value(m).data().iter().all(|&v| v == 1.5));
        let a = g.avg_pool_1d(c, 1, 3, 2).unwrap();
        assert!(g.value(a).data().iter().all(|&v| v == 1.5));

        assert!(matches!(g.max_pool_1d(x, 0, 5, 1), Err(Error::Window { kernel: 5, len: 4 })));
        assert!(g.avg_pool_1d(x, 0, 0, 1).is_err());
        assert!(g.avg_pool_1d(x, 0, 1, 0).is_err());
    }

    #[test]
    fn max_pool_routes_ties_to_first_index() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[4], &[2.0, 2.0, 1.0, 1.0]).with_requires_grad(true)).unwrap();
        let m = g.max_pool_1d(x, 0, 2, 2).unwrap();
        let s = g.sum(m).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn sum_gives_all_ones_and_frozen_gets_nothing() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[2, 3, 2], 0.3).with_requires_grad(true)).unwrap();
        let w = g.constant(Tensor::full(&[2, 3, 2], 2.0)).unwrap();
        let y = g.mul(x, w).unwrap();
        let z = g.add(y, x).unwrap();
        let s = g.sum(z).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0; 12]);
        assert!(g.grad(w).is_none());
    }

    #[test]
    fn identity_chain_yields_exact_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[3, 4], -1.25).with_requires_grad(true)).unwrap();
        let mut y = x;
        for i in 0..25 {
            y = if i % 2 == 0 {
                g.reshape(y, &[12]).unwrap()
            } else {
                g.reshape(y, &[3, 4]).unwrap()
            };
        }
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_contract_errors() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[2], 1.0).with_requires_grad(true)).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::TapeClosed)));
        assert!(matches!(g.sum(x), Err(Error::TapeClosed)));
    }

    #[test]
    fn rms_norm_cases() {
        let mut g = Graph::new();
        for c in [3.0, -0.5] {
            let x = g.constant(t(&[2], &[c, c])).unwrap();
            let w = g.constant(Tensor::full(&[2], 1.0)).unwrap();
            let y = g.rms_norm(x, w, 0.0).unwrap();
            let s = if c > 0.0 { 1.0 } else { -1.0 };
            for v in g.value(y).data() {
                assert!((v - s).abs() < 1e-15);
            }
        }
        let x = g.constant(t(&[2], &[1.0, 2.0])).unwrap();
        let w = g.constant(Tensor::zeros(&[2])).unwrap();
        let y = g.rms_norm(x, w, 1e-6).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
        let bad = g.constant(Tensor::zeros(&[3])).unwrap();
        assert!(g.rms_norm(x, bad, 1e-6).is_err());
    }

    #[test]
    fn single_position_attention_returns_values() {
        let mut g = Graph::new();
        let q = g.constant(t(&[1, 4], &[0.3, -1.0, 2.0, 0.1])).unwrap();
        let k = g.constant(t(&[1, 4], &[1.0, 0.5, -0.2, 0.7])).unwrap();
        let v = g.constant(t(&[1, 4], &[9.0, 8.0, 7.0, 6.0])).unwrap();
        let o = g.causal_attention(q, k, v, 1, 1, 2).unwrap();
        assert_eq!(g.value(o).data(), &[9.0, 8.0, 7.0, 6.0]);
    }

    #[test]
    fn gather_checks_ids() {
        let mut g = Graph::new();
        let tbl = g.constant(t(&[3, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0])).unwrap();
        let r = g.gather(tbl, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(r).data(), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        assert!(matches!(g.gather(tbl, &[3]), Err(Error::TokenOutOfRange { id: 3, vocab: 3 })));
    }
}
