//! Tape of recorded primitive applications and the reverse sweep over it.
//!
//! Nodes are appended in evaluation order, so every operand index is smaller
//! than the index of the node that consumes it. `backward` walks the tape from
//! the loss down to index zero and never revisits a node.

use std::borrow::Cow;

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One InfoNCE-style term evaluated against a similarity matrix.
///
/// The term's logits are `sim[anchor, positive] / tau` followed by
/// `sim[anchor, n] / tau` for every `n` in `negatives`; its value is the
/// negative log-softmax of the first logit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContrastiveTerm {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Add { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Scale { a: Var, factor: f64 },
    Reshape { a: Var },
    ConcatCols { parts: Vec<Var> },
    Softmax { a: Var, scale: f64 },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu { a: Var },
    Dropout { a: Var, mask: Vec<f64> },
    GatherRows { table: Var, ids: Vec<usize> },
    CosineSim { a: Var, b: Var },
    NormalizeRows { a: Var, norms: Vec<f64> },
    RowDot { a: Var, b: Var },
    Softplus { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    MeanRowBlocks { a: Var, block: usize },
    Contrastive {
        sim: Var,
        terms: Vec<ContrastiveTerm>,
        tau: f64,
        probs: Vec<Vec<f64>>,
    },
}

impl Op {
    pub(crate) fn operands(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b } | MatMulNt { a, b } | BatchMatMul { a, b, .. } | Add { a, b } => {
                vec![*a, *b]
            }
            CosineSim { a, b } | RowDot { a, b } => vec![*a, *b],
            AddBias { a, bias } => vec![*a, *bias],
            Scale { a, .. }
            | Reshape { a }
            | Softmax { a, .. }
            | Gelu { a }
            | Dropout { a, .. }
            | NormalizeRows { a, .. }
            | Softplus { a }
            | Sum { a }
            | Mean { a }
            | MeanRowBlocks { a, .. } => vec![*a],
            ConcatCols { parts } => parts.clone(),
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            GatherRows { table, .. } => vec![*table],
            Contrastive { sim, .. } => vec![*sim],
        }
    }
}

pub(crate) struct Node<'a> {
    pub(crate) value: Cow<'a, Tensor>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Multiply-accumulate counts, split by kernel family.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCount {
    /// Two-dimensional products (projections, feed-forward, prediction).
    pub dense: u64,
    /// Batched products; in the encoder these are exactly the attention
    /// score and weighted-value products.
    pub batched: u64,
}

/// A computation graph whose leaves may borrow tensors for lifetime `'a`.
#[derive(Default)]
pub struct Graph<'a> {
    pub(crate) nodes: Vec<Node<'a>>,
    pub(crate) flops: FlopCount,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn flops(&self) -> FlopCount {
        self.flops
    }

    fn leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed trainable leaf.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(t), true)
    }

    /// Borrowed leaf that receives no gradient.
    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(t), false)
    }

    /// Owned trainable leaf.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.leaf(Cow::Owned(t), true)
    }

    /// Owned leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(Cow::Owned(t), false)
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

    pub(crate) fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub(crate) fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = op.operands().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse-mode sweep seeded with `d loss / d loss = 1`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: shape.to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(shape.to_vec(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(Gradients {
            grads: leaf_grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt_acc(gd, self.data(*b), &mut da, m, n, k);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn_acc(self.data(*a), gd, &mut db, k, m, n);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::MatMulNt { a, b } => {
                // out[m×n] = a[m×k] · b[n×k]ᵀ
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_acc(gd, self.data(*b), &mut da, m, n, k);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; n * k];
                    kernels::matmul_tn_acc(gd, self.data(*a), &mut db, n, m, k);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![n, k], db));
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let ash = self.shape(*a);
                let (batch, p, q) = (ash[0], ash[1], ash[2]);
                let r = out.shape()[2];
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; batch * p * q];
                    for s in 0..batch {
                        let gs = &gd[s * p * r..(s + 1) * p * r];
                        let bs = &bd[s * q * r..(s + 1) * q * r];
                        let das = &mut da[s * p * q..(s + 1) * p * q];
                        if *transpose_b {
                            // b: [r×q]
                            kernels::matmul_acc(gs, bs, das, p, r, q);
                        } else {
                            kernels::matmul_nt_acc(gs, bs, das, p, r, q);
                        }
                    }
                    self.accumulate(grads, *a, Tensor::from_parts(ash.to_vec(), da));
                }
                if self.requires_grad(*b) {
                    let bsh = self.shape(*b).to_vec();
                    let mut db = vec![0.0; batch * q * r];
                    for s in 0..batch {
                        let gs = &gd[s * p * r..(s + 1) * p * r];
                        let as_ = &ad[s * p * q..(s + 1) * p * q];
                        let dbs = &mut db[s * q * r..(s + 1) * q * r];
                        if *transpose_b {
                            kernels::matmul_tn_acc(gs, as_, dbs, r, p, q);
                        } else {
                            kernels::matmul_tn_acc(as_, gs, dbs, q, p, r);
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(bsh, db));
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddBias { a, bias } => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*bias) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in gd.chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::from_parts(self.shape(*bias).to_vec(), db));
                }
            }
            Op::Scale { a, factor } => {
                let d = gd.iter().map(|v| v * factor).collect();
                self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Reshape { a } => {
                let d = gd.to_vec();
                self.accumulate(grads, *a, Tensor::from_parts(self.shape(*a).to_vec(), d));
            }
            Op::ConcatCols { parts } => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for part in parts {
                    let w = self.value(*part).cols();
                    if self.requires_grad(*part) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, *part, Tensor::from_parts(self.shape(*part).to_vec(), d));
                    }
                    offset += w;
                }
            }
            Op::Softmax { a, scale } => {
                let c = out.cols();
                let mut d = vec![0.0; gd.len()];
                for ((y, dy), dx) in out.data().chunks(c).zip(gd.chunks(c)).zip(d.chunks_mut(c)) {
                    let inner = kernels::dot(y, dy);
                    for i in 0..c {
                        dx[i] = scale * y[i] * (dy[i] - inner);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let c = out.cols();
                let gv = self.data(*gain);
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    for (r, (dy, xh)) in gd.chunks(c).zip(normalized.chunks(c)).enumerate() {
                        let dxhat: Vec<f64> = dy.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dx = kernels::dot(&dxhat, xh) / c as f64;
                        let row = &mut dx[r * c..(r + 1) * c];
                        for i in 0..c {
                            row[i] = inv_std[r] * (dxhat[i] - mean_d - xh[i] * mean_dx);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
                }
                if self.requires_grad(*gain) || self.requires_grad(*bias) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for (dy, xh) in gd.chunks(c).zip(normalized.chunks(c)) {
                        for i in 0..c {
                            dg[i] += dy[i] * xh[i];
                            db[i] += dy[i];
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::from_parts(vec![c], dg));
                    self.accumulate(grads, *bias, Tensor::from_parts(vec![c], db));
                }
            }
            Op::Gelu { a } => {
                let d = self
                    .data(*a)
                    .iter()
                    .zip(gd)
                    .map(|(&x, dy)| dy * (kernels::normal_cdf(x) + x * kernels::normal_pdf(x)))
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Dropout { a, mask } => {
                let d = gd.iter().zip(mask).map(|(dy, m)| dy * m).collect();
                self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::GatherRows { table, ids } => {
                let tsh = self.shape(*table).to_vec();
                let c: usize = tsh[1..].iter().product();
                let mut d = vec![0.0; self.value(*table).numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for (dst, src) in d[id * c..(id + 1) * c].iter_mut().zip(&gd[r * c..(r + 1) * c]) {
                        *dst += src;
                    }
                }
                self.accumulate(grads, *table, Tensor::from_parts(tsh, d));
            }
            Op::CosineSim { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let (na, nb) = (kernels::norm(ad), kernels::norm(bd));
                let c = out.item();
                let up = g.item();
                if self.requires_grad(*a) {
                    let d = ad
                        .iter()
                        .zip(bd)
                        .map(|(x, y)| up * (y / (na * nb) - c * x / (na * na)))
                        .collect();
                    self.accumulate(grads, *a, Tensor::from_parts(self.shape(*a).to_vec(), d));
                }
                if self.requires_grad(*b) {
                    let d = ad
                        .iter()
                        .zip(bd)
                        .map(|(x, y)| up * (x / (na * nb) - c * y / (nb * nb)))
                        .collect();
                    self.accumulate(grads, *b, Tensor::from_parts(self.shape(*b).to_vec(), d));
                }
            }
            Op::NormalizeRows { a, norms } => {
                let c = out.cols();
                let mut d = vec![0.0; gd.len()];
                for (r, ((y, dy), dx)) in out
                    .data()
                    .chunks(c)
                    .zip(gd.chunks(c))
                    .zip(d.chunks_mut(c))
                    .enumerate()
                {
                    let inner = kernels::dot(y, dy);
                    for i in 0..c {
                        dx[i] = (dy[i] - y[i] * inner) / norms[r];
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::RowDot { a, b } => {
                let c = self.value(*a).cols();
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.requires_grad(*a) {
                    let mut d = vec![0.0; ad.len()];
                    for (r, up) in gd.iter().enumerate() {
                        for i in r * c..(r + 1) * c {
                            d[i] = up * bd[i];
                        }
                    }
                    self.accumulate(grads, *a, Tensor::from_parts(self.shape(*a).to_vec(), d));
                }
                if self.requires_grad(*b) {
                    let mut d = vec![0.0; bd.len()];
                    for (r, up) in gd.iter().enumerate() {
                        for i in r * c..(r + 1) * c {
                            d[i] = up * ad[i];
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(self.shape(*b).to_vec(), d));
                }
            }
            Op::Softplus { a } => {
                let d = self
                    .data(*a)
                    .iter()
                    .zip(gd)
                    .map(|(&x, dy)| dy * kernels::sigmoid(x))
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Sum { a } => {
                let t = Tensor::full(self.shape(*a).to_vec(), g.item());
                self.accumulate(grads, *a, t);
            }
            Op::Mean { a } => {
                let n = self.value(*a).numel() as f64;
                let t = Tensor::full(self.shape(*a).to_vec(), g.item() / n);
                self.accumulate(grads, *a, t);
            }
            Op::MeanRowBlocks { a, block } => {
                let c = out.cols();
                let ash = self.shape(*a).to_vec();
                let mut d = vec![0.0; self.value(*a).numel()];
                let inv = 1.0 / *block as f64;
                for (b, up) in gd.chunks(c).enumerate() {
                    for r in 0..*block {
                        let row = &mut d[(b * block + r) * c..(b * block + r + 1) * c];
                        for (dst, u) in row.iter_mut().zip(up) {
                            *dst = u * inv;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(ash, d));
            }
            Op::Contrastive {
                sim,
                terms,
                tau,
                probs,
            } => {
                let ssh = self.shape(*sim).to_vec();
                let n = ssh[1];
                let mut d = vec![0.0; self.value(*sim).numel()];
                for ((term, p), up) in terms.iter().zip(probs).zip(gd) {
                    let row = term.anchor * n;
                    d[row + term.positive] += up * (p[0] - 1.0) / tau;
                    for (neg, pj) in term.negatives.iter().zip(&p[1..]) {
                        d[row + neg] += up * pj / tau;
                    }
                }
                self.accumulate(grads, *sim, Tensor::from_parts(ssh, d));
            }
        }
    }
}

/// Gradients of the loss with respect to every trainable leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if the loss does not reach it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}
