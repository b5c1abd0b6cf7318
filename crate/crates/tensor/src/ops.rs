use rand::Rng;

use crate::error::{Result, TensorError};
use crate::graph::{ContrastiveTerm, Graph, Op, Var};
use crate::kernels;
use crate::tensor::Tensor;

fn expect_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(TensorError::Rank {
            op,
            expected: rank,
            shape: shape.to_vec(),
        });
    }
    Ok(())
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<'a> Graph<'a> {
    /// `a[p×q] · b[q×r]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        expect_rank("matmul", &ash, 2)?;
        expect_rank("matmul", &bsh, 2)?;
        if ash[1] != bsh[0] {
            return Err(mismatch("matmul", &ash, &bsh));
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.data(a), self.data(b), &mut out, m, k, n);
        self.flops.dense += (m * k * n) as u64;
        self.push(Op::MatMul { a, b }, Tensor::from_parts(vec![m, n], out), "matmul")
    }

    /// `a[p×q] · b[r×q]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        expect_rank("matmul_nt", &ash, 2)?;
        expect_rank("matmul_nt", &bsh, 2)?;
        if ash[1] != bsh[1] {
            return Err(mismatch("matmul_nt", &ash, &bsh));
        }
        let (m, k, n) = (ash[0], ash[1], bsh[0]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt_acc(self.data(a), self.data(b), &mut out, m, k, n);
        self.flops.dense += (m * k * n) as u64;
        self.push(Op::MatMulNt { a, b }, Tensor::from_parts(vec![m, n], out), "matmul_nt")
    }

    /// Batched product over the leading axis: `[B×p×q] · [B×q×r]`, or
    /// `[B×p×q] · [B×r×q]ᵀ` when `transpose_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        expect_rank("batch_matmul", &ash, 3)?;
        expect_rank("batch_matmul", &bsh, 3)?;
        let (batch, p, q) = (ash[0], ash[1], ash[2]);
        let (inner, r) = if transpose_b { (bsh[2], bsh[1]) } else { (bsh[1], bsh[2]) };
        if bsh[0] != batch || inner != q {
            return Err(mismatch("batch_matmul", &ash, &bsh));
        }
        let mut out = vec![0.0; batch * p * r];
        let (ad, bd) = (self.data(a), self.data(b));
        for s in 0..batch {
            let as_ = &ad[s * p * q..(s + 1) * p * q];
            let bs = &bd[s * q * r..(s + 1) * q * r];
            let os = &mut out[s * p * r..(s + 1) * p * r];
            if transpose_b {
                kernels::matmul_nt_acc(as_, bs, os, p, q, r);
            } else {
                kernels::matmul_acc(as_, bs, os, p, q, r);
            }
        }
        self.flops.batched += (batch * p * q * r) as u64;
        self.push(
            Op::BatchMatMul { a, b, transpose_b },
            Tensor::from_parts(vec![batch, p, r], out),
            "batch_matmul",
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Add { a, b }, Tensor::from_parts(shape, out), "add")
    }

    /// Adds a vector along the last axis of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let c = self.value(a).cols();
        if self.shape(bias) != [c] {
            return Err(mismatch("add_bias", self.shape(a), self.shape(bias)));
        }
        let bd = self.data(bias);
        let out = self
            .data(a)
            .chunks(c)
            .flat_map(|row| row.iter().zip(bd).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::AddBias { a, bias }, Tensor::from_parts(shape, out), "add_bias")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.data(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale { a, factor }, Tensor::from_parts(shape, out), "scale")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let t = self.value(a).clone().reshape(shape)?;
        self.push(Op::Reshape { a }, t, "reshape")
    }

    /// Concatenates tensors with equal row counts along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::InvalidArgument {
                op: "concat_cols",
                msg: "no operands".into(),
            });
        };
        let rows = self.value(first).rows();
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        let mut total = 0;
        for &p in parts {
            let sh = self.shape(p);
            if sh.is_empty() || sh[..sh.len() - 1] != lead[..] {
                return Err(mismatch("concat_cols", self.shape(first), sh));
            }
            total += self.value(p).cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            Tensor::from_parts(shape, out),
            "concat_cols",
        )
    }

    /// Softmax over the last axis of `scale · a`, stabilised by subtracting
    /// the row maximum.
    pub fn softmax_rows(&mut self, a: Var, scale: f64) -> Result<Var> {
        if scale <= 0.0 || !scale.is_finite() {
            return Err(TensorError::InvalidArgument {
                op: "softmax_rows",
                msg: format!("scale must be positive, got {scale}"),
            });
        }
        let c = self.value(a).cols();
        if c == 0 {
            return Err(TensorError::InvalidArgument {
                op: "softmax_rows",
                msg: "empty rows".into(),
            });
        }
        let mut out: Vec<f64> = self.data(a).iter().map(|x| x * scale).collect();
        for row in out.chunks_mut(c) {
            kernels::softmax_in_place(row);
        }
        let shape = self.shape(a).to_vec();
        self.push(Op::Softmax { a, scale }, Tensor::from_parts(shape, out), "softmax_rows")
    }

    /// Normalises each last-axis row to zero mean and unit (biased) variance,
    /// then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).cols();
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gain)));
        }
        let rows = self.value(x).rows();
        let mut normalized = Vec::with_capacity(rows * c);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * c);
        let (gv, bv) = (self.data(gain), self.data(bias));
        for row in self.data(x).chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            inv_std.push(r);
            for i in 0..c {
                let xh = (row[i] - mean) * r;
                normalized.push(xh);
                out.push(gv[i] * xh + bv[i]);
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            Tensor::from_parts(shape, out),
            "layer_norm",
        )
    }

    /// Gaussian error linear unit in its exact form, `x · Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| x * kernels::normal_cdf(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Gelu { a }, Tensor::from_parts(shape, out), "gelu")
    }

    /// Inverted dropout. Identity (and no RNG draws) when `training` is false
    /// or `ratio` is zero.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        ratio: f64,
        rng: &mut R,
        training: bool,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                msg: format!("ratio must lie in [0, 1), got {ratio}"),
            });
        }
        if !training || ratio == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - ratio);
        let mask: Vec<f64> = (0..self.value(a).numel())
            .map(|_| if rng.random::<f64>() < ratio { 0.0 } else { keep })
            .collect();
        let out = self.data(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Dropout { a, mask }, Tensor::from_parts(shape, out), "dropout")
    }

    /// Looks up rows of `table` (first axis) by index.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tsh = self.shape(table).to_vec();
        if tsh.is_empty() {
            return Err(TensorError::Rank {
                op: "gather_rows",
                expected: 1,
                shape: tsh,
            });
        }
        let n = tsh[0];
        let c: usize = tsh[1..].iter().product();
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    bound: n,
                });
            }
            out.extend_from_slice(&td[id * c..(id + 1) * c]);
        }
        let mut shape = vec![ids.len()];
        shape.extend_from_slice(&tsh[1..]);
        self.push(
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            Tensor::from_parts(shape, out),
            "gather_rows",
        )
    }

    /// Cosine similarity of two tensors flattened to vectors.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).numel() != self.value(b).numel() {
            return Err(mismatch("cosine_sim", self.shape(a), self.shape(b)));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let (na, nb) = (kernels::norm(ad), kernels::norm(bd));
        if na == 0.0 || nb == 0.0 {
            return Err(TensorError::ZeroNorm { op: "cosine_sim" });
        }
        let c = kernels::dot(ad, bd) / (na * nb);
        self.push(Op::CosineSim { a, b }, Tensor::scalar(c), "cosine_sim")
    }

    /// Scales each last-axis row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let c = self.value(a).cols();
        let mut norms = Vec::with_capacity(self.value(a).rows());
        let mut out = Vec::with_capacity(self.value(a).numel());
        for row in self.data(a).chunks(c) {
            let n = kernels::norm(row);
            if n == 0.0 {
                return Err(TensorError::ZeroNorm {
                    op: "normalize_rows",
                });
            }
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        let shape = self.shape(a).to_vec();
        self.push(Op::NormalizeRows { a, norms }, Tensor::from_parts(shape, out), "normalize_rows")
    }

    /// Row-wise inner products of two `[n×d]` tensors, giving `[n]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) || self.shape(a).len() != 2 {
            return Err(mismatch("row_dot", self.shape(a), self.shape(b)));
        }
        let (n, c) = (self.shape(a)[0], self.shape(a)[1]);
        let (ad, bd) = (self.data(a), self.data(b));
        let out = (0..n)
            .map(|r| kernels::dot(&ad[r * c..(r + 1) * c], &bd[r * c..(r + 1) * c]))
            .collect();
        self.push(Op::RowDot { a, b }, Tensor::from_parts(vec![n], out), "row_dot")
    }

    /// Elementwise `log(1 + exp(x))`.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| kernels::softplus(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Softplus { a }, Tensor::from_parts(shape, out), "softplus")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        self.push(Op::Sum { a }, Tensor::scalar(s), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(TensorError::InvalidArgument {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let s = self.data(a).iter().sum::<f64>() / n as f64;
        self.push(Op::Mean { a }, Tensor::scalar(s), "mean")
    }

    /// Averages consecutive groups of `block` rows of a 2-D tensor.
    pub fn mean_row_blocks(&mut self, a: Var, block: usize) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        expect_rank("mean_row_blocks", &sh, 2)?;
        if block == 0 || !sh[0].is_multiple_of(block) {
            return Err(TensorError::InvalidArgument {
                op: "mean_row_blocks",
                msg: format!("{} rows do not split into blocks of {block}", sh[0]),
            });
        }
        let (rows, c) = (sh[0], sh[1]);
        let groups = rows / block;
        let ad = self.data(a);
        let mut out = vec![0.0; groups * c];
        for g in 0..groups {
            for r in 0..block {
                let src = &ad[(g * block + r) * c..(g * block + r + 1) * c];
                for (d, s) in out[g * c..(g + 1) * c].iter_mut().zip(src) {
                    *d += s;
                }
            }
            for d in &mut out[g * c..(g + 1) * c] {
                *d /= block as f64;
            }
        }
        self.push(
            Op::MeanRowBlocks { a, block },
            Tensor::from_parts(vec![groups, c], out),
            "mean_row_blocks",
        )
    }

    /// Per-term InfoNCE losses read off a square similarity matrix; returns
    /// a vector with one entry per term.
    pub fn contrastive_terms(&mut self, sim: Var, terms: Vec<ContrastiveTerm>, tau: f64) -> Result<Var> {
        if tau <= 0.0 || !tau.is_finite() {
            return Err(TensorError::InvalidArgument {
                op: "contrastive_terms",
                msg: format!("temperature must be positive, got {tau}"),
            });
        }
        let sh = self.shape(sim).to_vec();
        expect_rank("contrastive_terms", &sh, 2)?;
        let n = sh[1];
        let sd = self.data(sim);
        let mut probs = Vec::with_capacity(terms.len());
        let mut out = Vec::with_capacity(terms.len());
        for t in &terms {
            for &c in std::iter::once(&t.positive).chain(&t.negatives) {
                if t.anchor >= sh[0] || c >= n {
                    return Err(TensorError::IndexOutOfRange {
                        op: "contrastive_terms",
                        index: c.max(t.anchor),
                        bound: n,
                    });
                }
            }
            let row = &sd[t.anchor * n..(t.anchor + 1) * n];
            let mut logits: Vec<f64> = std::iter::once(t.positive)
                .chain(t.negatives.iter().copied())
                .map(|c| row[c] / tau)
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            out.push(lse - logits[0]);
            kernels::softmax_in_place(&mut logits);
            probs.push(logits);
        }
        let len = out.len();
        self.push(
            Op::Contrastive {
                sim,
                terms,
                tau,
                probs,
            },
            Tensor::from_parts(vec![len], out),
            "contrastive_terms",
        )
    }
}
