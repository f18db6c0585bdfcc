use std::borrow::Cow;
use std::cell::Cell;

use serde::{Deserialize, Serialize};

use super::attention::{attention_backward, attention_forward, AttentionKernel, AttentionMask, AttnInputs};
use super::{gemm, log_softmax_row, row_moments, Tensor, KL_EPS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Which bucket the multiply-adds of the next recorded ops are charged to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MacCategory {
    /// Projections, attention and feed-forward layers.
    Body,
    /// The output logits projection.
    Head,
    Uncounted,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacCounts {
    pub body: u64,
    pub head: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(target ‖ model)`.
    #[default]
    Forward,
    /// `KL(model ‖ target)`.
    Reverse,
}

enum Op<'a> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embed {
        table: NodeId,
        ids: Vec<usize>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        mask: &'a AttentionMask,
        cached_k: &'a [f64],
        cached_v: &'a [f64],
        cached: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    SoftmaxRows(NodeId),
    Sum(NodeId),
    SumSquares(NodeId),
    CrossEntropy {
        logits: NodeId,
        rows: Vec<(usize, usize, f64)>,
        denom: f64,
        probs: Vec<f64>,
    },
    Kl {
        logits: NodeId,
        rows: Vec<(usize, f64)>,
        targets: Vec<f64>,
        direction: KlDirection,
        denom: f64,
        log_q: Vec<f64>,
        per_row: Vec<f64>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op<'a>,
    requires_grad: bool,
}

/// Records operations in evaluation order so that [`Tape::backward`] can
/// replay them in reverse.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    category: Cell<MacCategory>,
    counts: Cell<MacCounts>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient of a scalar with respect to every node that requires one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            category: Cell::new(MacCategory::Uncounted),
            counts: Cell::new(MacCounts::default()),
        }
    }

    pub fn set_category(&self, c: MacCategory) {
        self.category.set(c);
    }

    pub fn mac_counts(&self) -> MacCounts {
        self.counts.get()
    }

    fn charge(&self, macs: u64) {
        let mut c = self.counts.get();
        match self.category.get() {
            MacCategory::Body => c.body += macs,
            MacCategory::Head => c.head += macs,
            MacCategory::Uncounted => {}
        }
        self.counts.set(c);
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op<'a>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn grad_of(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// A differentiable leaf borrowed from the caller (a model parameter).
    pub fn param(&mut self, t: &'a Tensor) -> NodeId {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// A differentiable leaf owned by the tape.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// A non-differentiable borrowed input.
    pub fn constant_ref(&mut self, t: &'a Tensor) -> NodeId {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = (bv.rows(), bv.cols());
        if k != k2 || av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(Error::dim("matmul", format!("{:?} · {:?}", av.shape(), bv.shape())));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, k, n, av.data(), (k, 1), bv.data(), (n, 1), 0.0, out.data_mut());
        self.charge((m * k * n) as u64);
        let g = self.grad_of(&[a, b]);
        Ok(self.push(Cow::Owned(out), Op::MatMul(a, b), g))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim("add", format!("{:?} + {:?}", av.shape(), bv.shape())));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        let g = self.grad_of(&[a, b]);
        Ok(self.push(Cow::Owned(out), Op::Add(a, b), g))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        if bv.len() != c {
            return Err(Error::dim("add_row", format!("row width {c}, bias {}", bv.len())));
        }
        let mut out = xv.clone();
        if c > 0 {
            for row in out.data_mut().chunks_mut(c) {
                for (o, b) in row.iter_mut().zip(bv.data()) {
                    *o += b;
                }
            }
        }
        let g = self.grad_of(&[x, bias]);
        Ok(self.push(Cow::Owned(out), Op::AddRow(x, bias), g))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v *= c;
        }
        let g = self.grad_of(&[x]);
        self.push(Cow::Owned(out), Op::Scale(x, c), g)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = gelu(*v);
        }
        let g = self.grad_of(&[x]);
        self.push(Cow::Owned(out), Op::Gelu(x), g)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let d = xv.cols();
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.len() != d || bv.len() != d || xv.shape().len() != 2 {
            return Err(Error::dim("layer_norm", format!("x {:?}, gain {}, bias {}", xv.shape(), gv.len(), bv.len())));
        }
        let n = xv.rows();
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = Tensor::zeros(&[n, d]);
        for i in 0..n {
            let row = xv.row(i);
            let (mean, inv) = row_moments(row);
            inv_std[i] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[i * d + j] = h;
                out.data_mut()[i * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let g = self.grad_of(&[x, gain, bias]);
        Ok(self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            g,
        ))
    }

    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let out = super::embed(self.value(table), ids)?;
        let g = self.grad_of(&[table]);
        Ok(self.push(
            Cow::Owned(out),
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            g,
        ))
    }

    /// Multi-head masked attention. `q`, `k`, `v` hold the rows of the current
    /// pass; `cached_k`/`cached_v` hold `cached` earlier rows (constants).
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        cached_k: &'a [f64],
        cached_v: &'a [f64],
        mask: &'a AttentionMask,
        heads: usize,
        kernel: AttentionKernel,
    ) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let n = qv.rows();
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() || heads == 0 || d % heads != 0 {
            return Err(Error::dim("attention", format!("q {:?}, k {:?}, v {:?}, heads {heads}", qv.shape(), kv.shape(), vv.shape())));
        }
        if cached_k.len() != cached_v.len() || cached_k.len() % d.max(1) != 0 {
            return Err(Error::dim("attention", "cached key/value size"));
        }
        let cached = if d == 0 { 0 } else { cached_k.len() / d };
        mask.validate(cached, n)?;
        let inp = AttnInputs {
            q: qv.data(),
            k: kv.data(),
            v: vv.data(),
            cached_k,
            cached_v,
            cached,
            d,
            heads,
        };
        let (out, probs, macs) = attention_forward(&inp, mask, kernel);
        self.charge(macs);
        let g = self.grad_of(&[q, k, v]);
        Ok(self.push(
            Cow::Owned(Tensor::new(vec![n, d], out)?),
            Op::Attention {
                q,
                k,
                v,
                mask,
                cached_k,
                cached_v,
                cached,
                heads,
                probs,
            },
            g,
        ))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let out = super::softmax_rows(self.value(x));
        let g = self.grad_of(&[x]);
        self.push(Cow::Owned(out), Op::SoftmaxRows(x), g)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        let g = self.grad_of(&[x]);
        self.push(Cow::Owned(Tensor::scalar(s)), Op::Sum(x), g)
    }

    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        let g = self.grad_of(&[x]);
        self.push(Cow::Owned(Tensor::scalar(s)), Op::SumSquares(x), g)
    }

    /// `Σ w·CE(row, target) / denom` over `(row, target, weight)` triples.
    pub fn cross_entropy(&mut self, logits: NodeId, rows: &[(usize, usize, f64)], denom: f64) -> Result<NodeId> {
        let lv = self.value(logits);
        let vsz = lv.cols();
        let mut probs = vec![0.0; rows.len() * vsz];
        let mut total = 0.0;
        for (r, &(row, target, w)) in rows.iter().enumerate() {
            if row >= lv.rows() || target >= vsz {
                return Err(Error::Range(format!("cross_entropy row {row} / target {target}")));
            }
            let lp = &mut probs[r * vsz..(r + 1) * vsz];
            log_softmax_row(lv.row(row), lp);
            total -= w * lp[target];
            for p in lp.iter_mut() {
                *p = p.exp();
            }
        }
        let g = self.grad_of(&[logits]);
        Ok(self.push(
            Cow::Owned(Tensor::scalar(total / denom)),
            Op::CrossEntropy {
                logits,
                rows: rows.to_vec(),
                denom,
                probs,
            },
            g,
        ))
    }

    /// `Σ w·KL / denom` between target rows (`targets`, one probability row
    /// per entry of `rows`) and `softmax(logits[row])`.
    pub fn kl(
        &mut self,
        logits: NodeId,
        rows: &[(usize, f64)],
        targets: Vec<f64>,
        direction: KlDirection,
        denom: f64,
    ) -> Result<NodeId> {
        let lv = self.value(logits);
        let vsz = lv.cols();
        if targets.len() != rows.len() * vsz {
            return Err(Error::dim("kl", format!("{} targets for {} rows of width {vsz}", targets.len(), rows.len())));
        }
        let mut log_q = vec![0.0; rows.len() * vsz];
        let mut per_row = vec![0.0; rows.len()];
        let mut total = 0.0;
        for (r, &(row, w)) in rows.iter().enumerate() {
            if row >= lv.rows() {
                return Err(Error::Range(format!("kl row {row}")));
            }
            let lq = &mut log_q[r * vsz..(r + 1) * vsz];
            log_softmax_row(lv.row(row), lq);
            let p = &targets[r * vsz..(r + 1) * vsz];
            let kl = match direction {
                KlDirection::Forward => p
                    .iter()
                    .zip(lq.iter())
                    .filter(|(&pi, _)| pi > 0.0)
                    .map(|(&pi, &lqi)| pi * (pi.ln() - lqi))
                    .sum::<f64>(),
                KlDirection::Reverse => p
                    .iter()
                    .zip(lq.iter())
                    .map(|(&pi, &lqi)| lqi.exp() * (lqi - pi.max(KL_EPS).ln()))
                    .sum::<f64>(),
            };
            per_row[r] = kl;
            total += w * kl;
        }
        let g = self.grad_of(&[logits]);
        Ok(self.push(
            Cow::Owned(Tensor::scalar(total / denom)),
            Op::Kl {
                logits,
                rows: rows.to_vec(),
                targets,
                direction,
                denom,
                log_q,
                per_row,
            },
            g,
        ))
    }

    /// Reverse-mode gradients of the scalar `loss`. Nodes that do not reach
    /// the loss get no entry, which callers treat as a zero gradient.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward", format!("loss has shape {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], id: NodeId) -> &'g mut Tensor {
        grads[id.0].get_or_insert_with(|| Tensor::zeros(self.value(id).shape()))
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node<'a>, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        macro_rules! acc {
            ($id:expr) => {
                self.slot(grads, $id)
            };
        }
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.wants(a) {
                    let ga = acc!(a);
                    gemm(m, n, k, gout.data(), (n, 1), bv.data(), (1, n), 1.0, ga.data_mut());
                }
                if self.wants(b) {
                    let gb = acc!(b);
                    gemm(k, m, n, av.data(), (1, k), gout.data(), (n, 1), 1.0, gb.data_mut());
                }
            }
            &Op::Add(a, b) => {
                for id in [a, b] {
                    if self.wants(id) {
                        acc!(id).add_assign(gout);
                    }
                }
            }
            &Op::AddRow(x, bias) => {
                if self.wants(x) {
                    acc!(x).add_assign(gout);
                }
                if self.wants(bias) {
                    let gb = acc!(bias);
                    let c = gout.cols();
                    if c > 0 {
                        for row in gout.data().chunks(c) {
                            for (g, r) in gb.data_mut().iter_mut().zip(row) {
                                *g += r;
                            }
                        }
                    }
                }
            }
            &Op::Scale(x, c) => {
                if self.wants(x) {
                    for (g, o) in acc!(x).data_mut().iter_mut().zip(gout.data()) {
                        *g += c * o;
                    }
                }
            }
            &Op::Gelu(x) => {
                if self.wants(x) {
                    let xv = self.value(x);
                    let gx = acc!(x);
                    for ((g, &xi), o) in gx.data_mut().iter_mut().zip(xv.data()).zip(gout.data()) {
                        *g += gelu_grad(xi) * o;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = gout.cols();
                let n = gout.rows();
                let gv = self.value(*gain).data().to_vec();
                if self.wants(*gain) {
                    let gg = acc!(*gain);
                    for i in 0..n {
                        for j in 0..d {
                            gg.data_mut()[j] += gout.data()[i * d + j] * xhat[i * d + j];
                        }
                    }
                }
                if self.wants(*bias) {
                    let gb = acc!(*bias);
                    for i in 0..n {
                        for j in 0..d {
                            gb.data_mut()[j] += gout.data()[i * d + j];
                        }
                    }
                }
                if self.wants(*x) {
                    let gx = acc!(*x);
                    let mut dxhat = vec![0.0; d];
                    for i in 0..n {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            dxhat[j] = gout.data()[i * d + j] * gv[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat[i * d + j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            gx.data_mut()[i * d + j] += inv_std[i] * (dxhat[j] - m1 - xhat[i * d + j] * m2);
                        }
                    }
                }
            }
            Op::Embed { table, ids } => {
                if self.wants(*table) {
                    let gt = acc!(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        for (g, o) in gt.row_mut(id).iter_mut().zip(gout.row(r)) {
                            *g += o;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                mask,
                cached_k,
                cached_v,
                cached,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let inp = AttnInputs {
                    q: qv.data(),
                    k: kv.data(),
                    v: vv.data(),
                    cached_k,
                    cached_v,
                    cached: *cached,
                    d: qv.cols(),
                    heads: *heads,
                };
                let len = qv.len();
                let (mut dq, mut dk, mut dv) = (vec![0.0; len], vec![0.0; len], vec![0.0; len]);
                attention_backward(&inp, mask, probs, gout.data(), &mut dq, &mut dk, &mut dv);
                for (id, g) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.wants(id) {
                        for (a, b) in acc!(id).data_mut().iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                }
            }
            &Op::SoftmaxRows(x) => {
                if self.wants(x) {
                    let y = &node.value;
                    let c = y.cols();
                    let gx = acc!(x);
                    for i in 0..y.rows() {
                        let (yr, gr) = (y.row(i), gout.row(i));
                        let dotp: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx.data_mut()[i * c + j] += yr[j] * (gr[j] - dotp);
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                if self.wants(x) {
                    let go = gout.item();
                    for g in acc!(x).data_mut() {
                        *g += go;
                    }
                }
            }
            &Op::SumSquares(x) => {
                if self.wants(x) {
                    let go = gout.item();
                    let xv = self.value(x);
                    for (g, xi) in acc!(x).data_mut().iter_mut().zip(xv.data()) {
                        *g += 2.0 * xi * go;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                rows,
                denom,
                probs,
            } => {
                if self.wants(*logits) {
                    let go = gout.item();
                    let gl = acc!(*logits);
                    let vsz = gl.cols();
                    for (r, &(row, target, w)) in rows.iter().enumerate() {
                        let scale = go * w / denom;
                        let p = &probs[r * vsz..(r + 1) * vsz];
                        let g = gl.row_mut(row);
                        for j in 0..vsz {
                            g[j] += scale * p[j];
                        }
                        g[target] -= scale;
                    }
                }
            }
            Op::Kl {
                logits,
                rows,
                targets,
                direction,
                denom,
                log_q,
                per_row,
            } => {
                if self.wants(*logits) {
                    let go = gout.item();
                    let gl = acc!(*logits);
                    let vsz = gl.cols();
                    for (r, &(row, w)) in rows.iter().enumerate() {
                        let scale = go * w / denom;
                        let p = &targets[r * vsz..(r + 1) * vsz];
                        let lq = &log_q[r * vsz..(r + 1) * vsz];
                        let g = gl.row_mut(row);
                        match direction {
                            KlDirection::Forward => {
                                let mass: f64 = p.iter().sum();
                                for j in 0..vsz {
                                    g[j] += scale * (mass * lq[j].exp() - p[j]);
                                }
                            }
                            KlDirection::Reverse => {
                                for j in 0..vsz {
                                    let qj = lq[j].exp();
                                    g[j] += scale * qj * (lq[j] - p[j].max(KL_EPS).ln() - per_row[r]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::super::BoolMatrix;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central finite differences of `f` with respect to each entry of each
    /// input, compared with the tape gradient.
    fn check<F>(inputs: &[Tensor], f: F)
    where
        F: for<'t> Fn(&mut Tape<'t>, &[NodeId]) -> NodeId,
    {
        let h = 1e-5;
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &ids);
        let grads = tape.backward(loss).unwrap();
        let eval = |vals: &[Tensor]| -> f64 {
            let mut t = Tape::new();
            let ids: Vec<NodeId> = vals.iter().map(|v| t.leaf(v.clone())).collect();
            let l = f(&mut t, &ids);
            t.value(l).item()
        };
        for (which, input) in inputs.iter().enumerate() {
            let analytic = grads.get(ids[which]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
            for e in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[which].data_mut()[e] += h;
                let mut minus = inputs.to_vec();
                minus[which].data_mut()[e] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[e];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(rel <= 1e-4, "input {which} entry {e}: analytic {a}, fd {fd}, rel {rel}");
            }
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]).unwrap());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn norm_of_product_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, &[3, 4]);
        let x = random(&mut rng, &[4, 2]);
        check(&[a, x], |t, ids| {
            let y = t.matmul(ids[0], ids[1]).unwrap();
            t.sum_squares(y)
        });
    }

    #[test]
    fn cross_entropy_gradient_at_uniform_logits() {
        let v = 5;
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(&[1, v]));
        let l = tape.cross_entropy(z, &[(0, 2, 1.0)], 1.0).unwrap();
        let g = tape.backward(l).unwrap();
        for (j, &gj) in g.get(z).unwrap().data().iter().enumerate() {
            let expected = 1.0 / v as f64 - if j == 2 { 1.0 } else { 0.0 };
            assert!((gj - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn disconnected_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.leaf(Tensor::scalar(3.0));
        let s = tape.sum_squares(x);
        let g = tape.backward(s).unwrap();
        assert!(g.get(y).is_none());
        assert_eq!(g.get(x).unwrap().item(), 4.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4]);
        let w = random(&mut rng, &[3, 4]);
        check(&[x, b, w], |t, ids| {
            let y = t.add_row(ids[0], ids[1]).unwrap();
            let y = t.gelu(y);
            let y = t.add(y, ids[2]).unwrap();
            let y = t.softmax_rows(y);
            let y = t.scale(y, 1.7);
            let y = t.matmul(y, ids[2]).unwrap_or(y);
            t.sum_squares(y)
        });
    }

    #[test]
    fn layer_norm_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, &[3, 5]);
        let g = random(&mut rng, &[5]);
        let b = random(&mut rng, &[5]);
        let w = random(&mut rng, &[5, 2]);
        check(&[x, g, b, w], |t, ids| {
            let y = t.layer_norm(ids[0], ids[1], ids[2]).unwrap();
            let y = t.matmul(y, ids[3]).unwrap();
            t.sum_squares(y)
        });
    }

    #[test]
    fn embed_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let table = random(&mut rng, &[4, 3]);
        check(&[table], |t, ids| {
            let e = t.embed(ids[0], &[1, 3, 1]).unwrap();
            t.sum_squares(e)
        });
    }

    #[test]
    fn attention_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random(&mut rng, &[4, 6]);
        let k = random(&mut rng, &[4, 6]);
        let v = random(&mut rng, &[4, 6]);
        let mask = AttentionMask::from_matrix(&BoolMatrix::from_fn(4, 4, |i, j| j <= i || (i == 1 && j == 3)));
        let mask: &'static AttentionMask = Box::leak(Box::new(mask));
        check(&[q, k, v], |t, ids| {
            let o = t.attention(ids[0], ids[1], ids[2], &[], &[], mask, 2, AttentionKernel::Sparse).unwrap();
            t.sum_squares(o)
        });
    }

    #[test]
    fn cached_attention_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = random(&mut rng, &[2, 4]);
        let k = random(&mut rng, &[2, 4]);
        let v = random(&mut rng, &[2, 4]);
        let ck: &'static [f64] = Box::leak(random(&mut rng, &[3, 4]).into_data().into_boxed_slice());
        let cv: &'static [f64] = Box::leak(random(&mut rng, &[3, 4]).into_data().into_boxed_slice());
        let mask = AttentionMask::from_matrix(&BoolMatrix::from_fn(2, 5, |i, j| j < 3 || j - 3 <= i));
        let mask: &'static AttentionMask = Box::leak(Box::new(mask));
        check(&[q, k, v], |t, ids| {
            let o = t.attention(ids[0], ids[1], ids[2], ck, cv, mask, 2, AttentionKernel::Sparse).unwrap();
            t.sum_squares(o)
        });
    }

    #[test]
    fn losses_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = random(&mut rng, &[3, 4]);
        let target: Vec<f64> = {
            let raw: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
            raw.chunks(4)
                .flat_map(|c| {
                    let s: f64 = c.iter().sum();
                    c.iter().map(move |x| x / s).collect::<Vec<_>>()
                })
                .collect()
        };
        for direction in [KlDirection::Forward, KlDirection::Reverse] {
            let t2 = target.clone();
            check(std::slice::from_ref(&z), move |t, ids| {
                let a = t.kl(ids[0], &[(0, 0.5), (2, 1.5)], t2.clone(), direction, 2.0).unwrap();
                let b = t.cross_entropy(ids[0], &[(1, 3, 1.0), (2, 0, 2.0)], 3.0).unwrap();
                t.add(a, b).unwrap()
            });
        }
    }

    #[test]
    fn forward_kl_zero_at_match() {
        let logits = Tensor::from_rows(&[vec![0.3, -1.0, 2.0]]).unwrap();
        let p = super::super::softmax_rows(&logits).into_data();
        let mut tape = Tape::new();
        let z = tape.leaf(logits);
        let l = tape.kl(z, &[(0, 1.0)], p, KlDirection::Forward, 1.0).unwrap();
        assert!(tape.value(l).item().abs() < 1e-15);
        let l2 = tape.value(l).item();
        assert!(l2 >= -1e-15);
    }

    #[test]
    fn mac_counter_tracks_categories() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[3, 4]));
        tape.set_category(MacCategory::Body);
        tape.matmul(a, b).unwrap();
        tape.set_category(MacCategory::Head);
        tape.matmul(a, b).unwrap();
        tape.set_category(MacCategory::Uncounted);
        tape.matmul(a, b).unwrap();
        assert_eq!(tape.mac_counts(), MacCounts { body: 24, head: 24 });
    }
}
