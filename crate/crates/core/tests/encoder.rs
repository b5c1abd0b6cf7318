use cbit_core::data::{MASK, PAD};
use cbit_core::encoder::{encode, predict_logits, item_logits, Model, ModelConfig, ModelParams, LAYER_NORM_EPS};
use cbit_core::tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(max_len: usize, dim: usize, layers: usize, heads: usize, num_items: usize) -> ModelConfig {
    ModelConfig {
        max_len,
        dim,
        layers,
        heads,
        num_items,
        dropout: 0.2,
        key_padding_mask: false,
        init_std: 0.5,
    }
}

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn mul(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum())
                .collect()
        })
        .collect()
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + LAYER_NORM_EPS).sqrt() * g[i] + b[i])
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Eval-mode forward pass written with nested vectors.
fn reference_forward(p: &ModelParams, cfg: &ModelConfig, tokens: &[usize]) -> (Mat, Vec<Vec<Mat>>) {
    let t = tokens.len();
    let dh = cfg.dim / cfg.heads;
    let mut h: Mat = (0..t)
        .map(|i| {
            let e = p.item_emb.row(tokens[i]);
            let pe = p.pos_emb.row(i);
            e.iter().zip(pe).map(|(a, b)| a + b).collect()
        })
        .collect();
    let mut maps = Vec::new();
    for lp in &p.layers {
        let mut cat = vec![Vec::new(); t];
        let mut layer_maps = Vec::new();
        for hi in 0..cfg.heads {
            let q = mul(&h, &mat(&lp.query[hi]));
            let k = mul(&h, &mat(&lp.key[hi]));
            let v = mul(&h, &mat(&lp.value[hi]));
            let mut a = vec![vec![0.0; t]; t];
            for i in 0..t {
                let s: Vec<f64> = (0..t)
                    .map(|j| q[i].iter().zip(&k[j]).map(|(x, y)| x * y).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
                for j in 0..t {
                    a[i][j] = (s[j] - m).exp() / z;
                }
            }
            let ctx = mul(&a, &v);
            for i in 0..t {
                cat[i].extend_from_slice(&ctx[i]);
            }
            layer_maps.push(a);
        }
        let mh = mul(&cat, &mat(&lp.output));
        let f: Mat = (0..t)
            .map(|i| {
                let s: Vec<f64> = h[i].iter().zip(&mh[i]).map(|(a, b)| a + b).collect();
                layer_norm(&s, lp.attn_norm_gain.data(), lp.attn_norm_bias.data())
            })
            .collect();
        let mut inner = mul(&f, &mat(&lp.ffn_in));
        for row in &mut inner {
            for (x, b) in row.iter_mut().zip(lp.ffn_in_bias.data()) {
                *x = gelu(*x + b);
            }
        }
        let out = mul(&inner, &mat(&lp.ffn_out));
        h = (0..t)
            .map(|i| {
                let s: Vec<f64> = f[i]
                    .iter()
                    .zip(&out[i])
                    .zip(lp.ffn_out_bias.data())
                    .map(|((a, b), c)| a + b + c)
                    .collect();
                layer_norm(&s, lp.ffn_norm_gain.data(), lp.ffn_norm_bias.data())
            })
            .collect();
        maps.push(layer_maps);
    }
    (h, maps)
}

/// Random (non-default) values everywhere so gains and biases matter.
fn randomised(cfg: &ModelConfig, seed: u64) -> Model {
    let mut m = Model::init(cfg.clone(), seed).unwrap();
    let mut k = 0u64;
    for t in m.params.values_mut() {
        for v in t.data_mut() {
            k += 1;
            *v = ((k * 2654435761 + seed) % 1000) as f64 / 500.0 - 1.0;
        }
    }
    m
}

#[test]
fn forward_matches_reference_implementation() {
    let cfg = config(3, 4, 1, 2, 6);
    let model = randomised(&cfg, 3);
    let tokens = [PAD, 4, MASK];
    let (h, maps) = model.run(&[&tokens]).unwrap();
    let (want_h, want_maps) = reference_forward(&model.params, &cfg, &tokens);
    for (t, row) in want_h.iter().enumerate() {
        for (a, b) in h.row(t).iter().zip(row) {
            assert!((a - b).abs() < 1e-10, "hidden {t}: {a} vs {b}");
        }
    }
    let got = model.attention_maps(&tokens).unwrap();
    for hi in 0..2 {
        assert_eq!(maps[0][hi].shape(), [1, 3, 3]);
        for i in 0..3 {
            for j in 0..3 {
                assert!((got[0][hi].row(i)[j] - want_maps[0][hi][i][j]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn two_layer_forward_matches_reference() {
    let cfg = config(5, 6, 2, 3, 9);
    let model = randomised(&cfg, 8);
    let tokens = [PAD, 3, 7, MASK, 10];
    let (h, _) = model.run(&[&tokens]).unwrap();
    let (want, _) = reference_forward(&model.params, &cfg, &tokens);
    for (t, row) in want.iter().enumerate() {
        for (a, b) in h.row(t).iter().zip(row) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn zero_layers_is_the_embedding_sum() {
    let cfg = config(4, 3, 0, 1, 5);
    let model = randomised(&cfg, 1);
    let tokens = [PAD, 2, 6, MASK];
    let (h, attn) = model.run(&[&tokens]).unwrap();
    assert!(attn.is_empty());
    for (t, &tok) in tokens.iter().enumerate() {
        for c in 0..3 {
            let want = model.params.item_emb.row(tok)[c] + model.params.pos_emb.row(t)[c];
            assert_eq!(h.row(t)[c], want);
        }
    }
}

#[test]
fn single_position_attends_to_itself() {
    // Models refuse T = 1 (no room for history), so drive the encoder directly.
    let cfg = config(1, 4, 2, 1, 3);
    let params = ModelParams::layout(&cfg).map(|shape| Tensor::from_fn(shape.clone(), |i| (i as f64 * 0.37).sin()));
    let mut g = Graph::new();
    let p = params.map(|t| g.constant_ref(t));
    let enc = encode(&mut g, &p, &cfg, &[&[3]], false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for layer in &enc.attention {
        assert_eq!(g.value(layer[0]).data(), [1.0]);
    }
    assert!(Model::init(cfg, 1).is_err());
}

#[test]
fn logits_are_affine_in_the_hidden_state() {
    let cfg = config(3, 4, 1, 2, 6);
    let model = randomised(&cfg, 2);
    let mut g = Graph::new();
    let p = model.params.map(|t| g.constant_ref(t));
    let h = g.constant(Tensor::from_fn([2, 4], |i| i as f64 * 0.25 - 0.5));
    let logits = predict_logits(&mut g, &p, h).unwrap();
    let some = item_logits(&mut g, &p, h, &[1, 0, 1], &[2, 7, 5]).unwrap();
    let lv = g.value(logits).clone();
    assert_eq!(lv.shape(), [2, 6]);
    let hv = g.value(h).clone();
    for r in 0..2 {
        for i in 0..6 {
            let w = model.params.pred_weight.row(i);
            let want: f64 = w.iter().zip(hv.row(r)).map(|(a, b)| a * b).sum::<f64>() + model.params.pred_bias.data()[i];
            assert!((lv.row(r)[i] - want).abs() < 1e-12);
        }
    }
    let sv = g.value(some).data().to_vec();
    assert_eq!(sv, [lv.row(1)[0], lv.row(0)[5], lv.row(1)[3]]);
}

#[test]
fn special_tokens_have_no_logit() {
    let cfg = config(3, 4, 1, 2, 6);
    let model = Model::init(cfg, 2).unwrap();
    let mut g = Graph::new();
    let p = model.params.map(|t| g.constant_ref(t));
    let h = g.constant(Tensor::zeros([1, 4]));
    assert!(item_logits(&mut g, &p, h, &[0], &[MASK]).is_err());
}

#[test]
fn attention_cost_grows_quadratically_with_length() {
    let flops = |t: usize| {
        let cfg = config(t, 8, 2, 2, 10);
        let model = Model::init(cfg.clone(), 1).unwrap();
        let tokens = vec![3; t];
        let mut g = Graph::new();
        let p = model.params.map(|x| g.constant_ref(x));
        encode(&mut g, &p, &cfg, &[&tokens], false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        g.flops()
    };
    for t in [4, 8, 16] {
        let (a, b) = (flops(t), flops(2 * t));
        assert_eq!(b.batched, 4 * a.batched);
        assert_eq!(b.dense, 2 * a.dense);
    }
}

#[test]
fn eval_forward_is_deterministic_and_batch_independent() {
    let cfg = config(5, 8, 2, 2, 10);
    let model = Model::init(cfg, 4).unwrap();
    let a = [PAD, 2, 3, 4, MASK];
    let b = [5, 6, 7, 8, 9];
    let (solo, _) = model.run(&[&a]).unwrap();
    let (pair, _) = model.run(&[&b, &a]).unwrap();
    let (again, _) = model.run(&[&a]).unwrap();
    assert_eq!(solo, again);
    for t in 0..5 {
        for (x, y) in solo.row(t).iter().zip(pair.row(5 + t)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn training_forward_uses_dropout() {
    let cfg = config(5, 8, 1, 2, 10);
    let model = Model::init(cfg.clone(), 4).unwrap();
    let tokens = [2, 3, 4, 5, 6];
    let run = |training: bool, seed: u64| {
        let mut g = Graph::new();
        let p = model.params.map(|x| g.constant_ref(x));
        let e = encode(&mut g, &p, &cfg, &[&tokens], training, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        g.value(e.hidden).clone()
    };
    assert_eq!(run(false, 1), run(false, 2));
    assert_eq!(run(true, 1), run(true, 1));
    assert_ne!(run(true, 1), run(true, 2));
}

#[test]
fn key_padding_mask_hides_padding() {
    let mut cfg = config(4, 4, 1, 2, 5);
    cfg.key_padding_mask = true;
    let model = Model::init(cfg, 3).unwrap();
    let maps = model.attention_maps(&[PAD, PAD, 3, 4]).unwrap();
    for head in &maps[0] {
        for i in 0..4 {
            assert!(head.row(i)[0] < 1e-12 && head.row(i)[1] < 1e-12);
        }
    }
}

#[test]
fn window_length_must_match() {
    let model = Model::init(config(4, 4, 1, 2, 5), 3).unwrap();
    assert!(model.run(&[&[2, 3]]).is_err());
}

proptest! {
    #[test]
    fn attention_rows_are_distributions(seed in 0u64..1000, toks in prop::collection::vec(0usize..9, 6)) {
        let model = Model::init(config(6, 8, 2, 2, 7), seed).unwrap();
        for layer in model.attention_maps(&toks).unwrap() {
            for head in layer {
                for r in 0..6 {
                    let row = head.row(r);
                    prop_assert!(row.iter().all(|&v| v >= 0.0));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn init_respects_truncation(seed in 0u64..1000) {
        let cfg = config(6, 8, 1, 2, 7);
        let p = ModelParams::init(&cfg, seed).unwrap();
        for (name, t) in p.entries() {
            if name.ends_with("gain") {
                prop_assert!(t.data().iter().all(|&v| v == 1.0));
            } else if name.ends_with("bias") {
                prop_assert!(t.data().iter().all(|&v| v == 0.0));
            } else {
                prop_assert!(t.data().iter().all(|&v| v.abs() <= 2.0 * cfg.init_std));
            }
        }
    }
}
