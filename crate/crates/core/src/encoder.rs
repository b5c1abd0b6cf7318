//! Bidirectional Transformer encoder: embeddings, a stack of post-norm
//! blocks, and an untied item prediction layer.

use cbit_tensor::{Graph, Parameters, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{FIRST_ITEM, PAD};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-12;
/// Added to attention scores of padding keys when key masking is enabled.
const PAD_KEY_PENALTY: f64 = -1e9;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Window length `T`.
    pub max_len: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Real items `|V|`; the token vocabulary adds padding and mask.
    pub num_items: usize,
    pub dropout: f64,
    /// Exclude padding positions from attention (off by default).
    pub key_padding_mask: bool,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            max_len: 20,
            dim: 256,
            layers: 2,
            heads: 2,
            num_items: 1,
            dropout: 0.3,
            key_padding_mask: false,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "dim ({}) must be a positive multiple of heads ({})",
                self.dim, self.heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::config(format!("max_len must be at least 2, got {}", self.max_len)));
        }
        if self.num_items == 0 {
            return Err(Error::config("num_items must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::config(format!("init_std must be positive, got {}", self.init_std)));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.num_items + FIRST_ITEM
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    /// Per-head projections, each `[d × d/h]`.
    pub query: Vec<T>,
    pub key: Vec<T>,
    pub value: Vec<T>,
    pub output: T,
    pub attn_norm_gain: T,
    pub attn_norm_bias: T,
    pub ffn_in: T,
    pub ffn_in_bias: T,
    pub ffn_out: T,
    pub ffn_out_bias: T,
    pub ffn_norm_gain: T,
    pub ffn_norm_bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    /// `[(|V| + 2) × d]`, rows for padding and mask included.
    pub item_emb: T,
    pub pos_emb: T,
    pub layers: Vec<LayerParams<T>>,
    /// `[|V| × d]`, not tied to `item_emb`.
    pub pred_weight: T,
    pub pred_bias: T,
}

impl<T> ModelParams<T> {
    /// Applies `f` to every entry in canonical order, passing its name.
    pub fn map_named<'s, U>(&'s self, mut f: impl FnMut(&str, &'s T) -> U) -> ModelParams<U> {
        let item_emb = f("item_emb", &self.item_emb);
        let pos_emb = f("pos_emb", &self.pos_emb);
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, lp)| {
                let mut heads = |part: &str, v: &'s [T]| -> Vec<U> {
                    v.iter()
                        .enumerate()
                        .map(|(h, t)| f(&format!("layer{l}.head{h}.{part}"), t))
                        .collect()
                };
                let query = heads("query", &lp.query);
                let key = heads("key", &lp.key);
                let value = heads("value", &lp.value);
                let mut one = |part: &str, t: &'s T| f(&format!("layer{l}.{part}"), t);
                LayerParams {
                    query,
                    key,
                    value,
                    output: one("output", &lp.output),
                    attn_norm_gain: one("attn_norm_gain", &lp.attn_norm_gain),
                    attn_norm_bias: one("attn_norm_bias", &lp.attn_norm_bias),
                    ffn_in: one("ffn_in", &lp.ffn_in),
                    ffn_in_bias: one("ffn_in_bias", &lp.ffn_in_bias),
                    ffn_out: one("ffn_out", &lp.ffn_out),
                    ffn_out_bias: one("ffn_out_bias", &lp.ffn_out_bias),
                    ffn_norm_gain: one("ffn_norm_gain", &lp.ffn_norm_gain),
                    ffn_norm_bias: one("ffn_norm_bias", &lp.ffn_norm_bias),
                }
            })
            .collect();
        ModelParams {
            item_emb,
            pos_emb,
            layers,
            pred_weight: f("pred_weight", &self.pred_weight),
            pred_bias: f("pred_bias", &self.pred_bias),
        }
    }

    pub fn map<'s, U>(&'s self, mut f: impl FnMut(&'s T) -> U) -> ModelParams<U> {
        self.map_named(|_, t| f(t))
    }

    pub fn entries(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.map_named(|n, t| out.push((n.to_string(), t)));
        out
    }

    pub fn values(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.map(|t| out.push(t));
        out
    }

    /// Mutable references in the same order as [`ModelParams::entries`].
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.item_emb, &mut self.pos_emb];
        for lp in &mut self.layers {
            out.extend(lp.query.iter_mut());
            out.extend(lp.key.iter_mut());
            out.extend(lp.value.iter_mut());
            out.extend([
                &mut lp.output,
                &mut lp.attn_norm_gain,
                &mut lp.attn_norm_bias,
                &mut lp.ffn_in,
                &mut lp.ffn_in_bias,
                &mut lp.ffn_out,
                &mut lp.ffn_out_bias,
                &mut lp.ffn_norm_gain,
                &mut lp.ffn_norm_bias,
            ]);
        }
        out.push(&mut self.pred_weight);
        out.push(&mut self.pred_bias);
        out
    }
}

impl ModelParams<Vec<usize>> {
    /// Expected shape of every tensor for `cfg`.
    pub fn layout(cfg: &ModelConfig) -> Self {
        let (d, dh, ff) = (cfg.dim, cfg.head_dim(), 4 * cfg.dim);
        let layer = LayerParams {
            query: vec![vec![d, dh]; cfg.heads],
            key: vec![vec![d, dh]; cfg.heads],
            value: vec![vec![d, dh]; cfg.heads],
            output: vec![d, d],
            attn_norm_gain: vec![d],
            attn_norm_bias: vec![d],
            ffn_in: vec![d, ff],
            ffn_in_bias: vec![ff],
            ffn_out: vec![ff, d],
            ffn_out_bias: vec![d],
            ffn_norm_gain: vec![d],
            ffn_norm_bias: vec![d],
        };
        ModelParams {
            item_emb: vec![cfg.vocab_size(), d],
            pos_emb: vec![cfg.max_len, d],
            layers: vec![layer; cfg.layers],
            pred_weight: vec![cfg.num_items, d],
            pred_bias: vec![cfg.num_items],
        }
    }
}

impl ModelParams<Tensor> {
    /// Truncated normal (±2 std) weights, zero biases, unit layer-norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::config(e.to_string()))?;
        let bound = 2.0 * cfg.init_std;
        Ok(ModelParams::layout(cfg).map_named(|name, shape| {
            if name.ends_with("bias") {
                Tensor::zeros(shape.clone())
            } else if name.ends_with("gain") {
                Tensor::full(shape.clone(), 1.0)
            } else {
                Tensor::from_fn(shape.clone(), |_| loop {
                    let x: f64 = normal.sample(&mut rng);
                    if x.abs() <= bound {
                        break x;
                    }
                })
            }
        }))
    }

    /// Checks every tensor against the layout implied by `cfg`.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = ModelParams::layout(cfg);
        if self.layers.len() != cfg.layers || self.layers.iter().any(|l| l.query.len() != cfg.heads) {
            return Err(Error::Checkpoint(format!(
                "parameters have {} layers, config expects {} layers of {} heads",
                self.layers.len(),
                cfg.layers,
                cfg.heads
            )));
        }
        for ((name, t), (_, shape)) in self.entries().into_iter().zip(expected.entries()) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, config expects {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Numeric(format!("{name} contains non-finite values")));
            }
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.values().iter().map(|t| t.numel()).sum()
    }
}

impl Parameters for ModelParams<Tensor> {
    fn count(&self) -> usize {
        self.values().len()
    }

    fn tensor(&self, i: usize) -> &Tensor {
        self.values()[i]
    }

    fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        self.values_mut().swap_remove(i)
    }

    fn name(&self, i: usize) -> String {
        self.entries().swap_remove(i).0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.check_layout(&config)?;
        Ok(Self { config, params })
    }

    /// Eval-mode last-layer hidden states `[B·T × d]` and per-layer,
    /// per-head attention `[B × T × T]`.
    pub fn run(&self, windows: &[&[usize]]) -> Result<(Tensor, Vec<Vec<Tensor>>)> {
        let mut g = Graph::new();
        let p = self.params.map(|t| g.constant_ref(t));
        let enc = encode(&mut g, &p, &self.config, windows, false, &mut NoRng)?;
        let attn = enc
            .attention
            .iter()
            .map(|layer| layer.iter().map(|&a| g.value(a).clone()).collect())
            .collect();
        Ok((g.value(enc.hidden).clone(), attn))
    }

    /// Softmax attention of a dropout-free pass over one window, indexed
    /// `[layer][head]`, each `[T × T]`.
    pub fn attention_maps(&self, tokens: &[usize]) -> Result<Vec<Vec<Tensor>>> {
        let (_, attn) = self.run(&[tokens])?;
        let t = self.config.max_len;
        attn.into_iter()
            .map(|layer| {
                layer
                    .into_iter()
                    .map(|a| a.reshape([t, t]).map_err(Error::from))
                    .collect()
            })
            .collect()
    }
}

/// Stands in for an RNG where dropout is disabled; never called.
pub(crate) struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("eval-mode forward draws no randomness")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("eval-mode forward draws no randomness")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("eval-mode forward draws no randomness")
    }
}

pub struct Encoded {
    /// `[B·T × d]`, row `b·T + t`.
    pub hidden: Var,
    /// `[layer][head]`, each `[B × T × T]`.
    pub attention: Vec<Vec<Var>>,
}

/// Records the embedding layer and all blocks for a batch of windows.
pub fn encode<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    windows: &[&[usize]],
    training: bool,
    rng: &mut R,
) -> Result<Encoded> {
    let (t, d) = (cfg.max_len, cfg.dim);
    let b = windows.len();
    if b == 0 {
        return Err(Error::config("empty batch"));
    }
    if let Some(w) = windows.iter().find(|w| w.len() != t) {
        return Err(Error::config(format!("window of length {} given to a model with max_len {t}", w.len())));
    }
    let flat: Vec<usize> = windows.iter().flat_map(|w| w.iter().copied()).collect();
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();

    let e = g.gather_rows(p.item_emb, &flat)?;
    let pe = g.gather_rows(p.pos_emb, &positions)?;
    let mut h = g.add(e, pe)?;
    h = g.dropout(h, cfg.dropout, rng, training)?;

    let key_mask = if cfg.key_padding_mask && flat.contains(&PAD) {
        let mut m = Tensor::zeros([b, t, t]);
        for (bi, w) in windows.iter().enumerate() {
            for (j, &tok) in w.iter().enumerate() {
                if tok == PAD {
                    for i in 0..t {
                        m.data_mut()[(bi * t + i) * t + j] = PAD_KEY_PENALTY;
                    }
                }
            }
        }
        Some(g.constant(m))
    } else {
        None
    };

    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut attention = Vec::with_capacity(p.layers.len());
    for lp in &p.layers {
        let mut heads = Vec::with_capacity(cfg.heads);
        let mut maps = Vec::with_capacity(cfg.heads);
        for hi in 0..cfg.heads {
            let q = g.matmul(h, lp.query[hi])?;
            let k = g.matmul(h, lp.key[hi])?;
            let v = g.matmul(h, lp.value[hi])?;
            let q = g.reshape(q, [b, t, dh])?;
            let k = g.reshape(k, [b, t, dh])?;
            let v = g.reshape(v, [b, t, dh])?;
            let mut scores = g.batch_matmul(q, k, true)?;
            if let Some(m) = key_mask {
                scores = g.add(scores, m)?;
            }
            let a = g.softmax_rows(scores, scale)?;
            let ctx = g.batch_matmul(a, v, false)?;
            heads.push(g.reshape(ctx, [b * t, dh])?);
            maps.push(a);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let mh = g.matmul(cat, lp.output)?;
        let mh = g.dropout(mh, cfg.dropout, rng, training)?;
        let f = g.add(h, mh)?;
        let f = g.layer_norm(f, lp.attn_norm_gain, lp.attn_norm_bias, LAYER_NORM_EPS)?;

        let ff = g.matmul(f, lp.ffn_in)?;
        let ff = g.add_bias(ff, lp.ffn_in_bias)?;
        let ff = g.gelu(ff)?;
        let ff = g.matmul(ff, lp.ffn_out)?;
        let ff = g.add_bias(ff, lp.ffn_out_bias)?;
        let ff = g.dropout(ff, cfg.dropout, rng, training)?;
        let out = g.add(f, ff)?;
        h = g.layer_norm(out, lp.ffn_norm_gain, lp.ffn_norm_bias, LAYER_NORM_EPS)?;
        attention.push(maps);
    }
    debug_assert_eq!(g.shape(h), [b * t, d]);
    Ok(Encoded { hidden: h, attention })
}

/// Logits over every real item for each row of `h` (`[n × d]` → `[n × |V|]`).
pub fn predict_logits(g: &mut Graph<'_>, p: &ModelParams<Var>, h: Var) -> Result<Var> {
    let z = g.matmul_nt(h, p.pred_weight)?;
    Ok(g.add_bias(z, p.pred_bias)?)
}

/// One logit per `(row, item)` pair: `W^P[item] · hidden[row] + b^P[item]`.
pub fn item_logits(g: &mut Graph<'_>, p: &ModelParams<Var>, hidden: Var, rows: &[usize], items: &[usize]) -> Result<Var> {
    debug_assert_eq!(rows.len(), items.len());
    let slots = items
        .iter()
        .map(|&it| {
            it.checked_sub(FIRST_ITEM)
                .ok_or_else(|| Error::config(format!("token {it} is not an item and has no logit")))
        })
        .collect::<Result<Vec<_>>>()?;
    let h = g.gather_rows(hidden, rows)?;
    let w = g.gather_rows(p.pred_weight, &slots)?;
    let b = g.gather_rows(p.pred_bias, &slots)?;
    let dot = g.row_dot(h, w)?;
    Ok(g.add(dot, b)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            max_len: 4,
            dim: 6,
            layers: 2,
            heads: 3,
            num_items: 5,
            dropout: 0.1,
            key_padding_mask: false,
            init_std: 0.02,
        }
    }

    #[test]
    fn layout_and_entries_agree() {
        let cfg = tiny();
        let p = ModelParams::init(&cfg, 1).unwrap();
        let names: Vec<String> = p.entries().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 2 + 2 * (3 * 3 + 9) + 2);
        assert_eq!(names[2], "layer0.head0.query");
        assert_eq!(p.pred_weight.shape(), [5, 6]);
        assert_eq!(p.item_emb.shape(), [7, 6]);
        let mut q = p.clone();
        let n = q.values_mut().len();
        assert_eq!(n, names.len());
        for (i, (_, t)) in p.entries().iter().enumerate() {
            assert_eq!(q.tensor_mut(i).shape(), t.shape());
            assert_eq!(Parameters::name(&p, i), names[i]);
        }
    }

    #[test]
    fn init_is_seeded_and_truncated() {
        let cfg = tiny();
        let a = ModelParams::init(&cfg, 3).unwrap();
        assert_eq!(a, ModelParams::init(&cfg, 3).unwrap());
        assert_ne!(a, ModelParams::init(&cfg, 4).unwrap());
        assert!(a.item_emb.data().iter().all(|v| v.abs() <= 0.04));
        assert!(a.pred_bias.data().iter().all(|&v| v == 0.0));
        assert!(a.layers[1].ffn_norm_gain.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.heads = 4;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.max_len = 1;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn layout_mismatch_is_reported() {
        let cfg = tiny();
        let p = ModelParams::init(&cfg, 1).unwrap();
        let mut other = cfg.clone();
        other.num_items = 6;
        assert!(Model::from_params(other, p).is_err());
    }
}
