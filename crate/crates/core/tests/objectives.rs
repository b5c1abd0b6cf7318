use std::f64::consts::{E, LN_2};

use cbit_core::data::TrainingWindow;
use cbit_core::encoder::{Model, ModelConfig};
use cbit_core::objectives::{
    cloze_loss, gen_masked_views, joint_loss, multi_pair_contrastive_loss, pair_contrastive_terms, sample_negative,
    step_losses, ContrastivePlan, MaskedViewBatch, ObjectiveConfig, Pooling, Reduction, ThetaState,
};
use cbit_core::tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config() -> ModelConfig {
    ModelConfig {
        max_len: 6,
        dim: 8,
        layers: 1,
        heads: 2,
        num_items: 15,
        dropout: 0.2,
        key_padding_mask: false,
        init_std: 0.3,
    }
}

fn batch(m: usize, seed: u64) -> (Vec<TrainingWindow>, Vec<Vec<usize>>, MaskedViewBatch) {
    let seqs = vec![vec![2, 4, 6, 8, 10], vec![3, 5, 7, 9, 11, 13], vec![12, 14, 16]];
    let windows: Vec<TrainingWindow> = seqs.iter().enumerate().map(|(u, s)| TrainingWindow::padded(s, 6, u)).collect();
    let seen: Vec<Vec<usize>> = seqs.clone();
    let refs: Vec<&TrainingWindow> = windows.iter().collect();
    let b = MaskedViewBatch::generate(&refs, &seen, 15, 0.4, m, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (windows, seen, b)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[test]
fn zero_logits_give_two_ln2_per_position() {
    let mut model = Model::init(config(), 1).unwrap();
    model.params.pred_weight = Tensor::zeros(model.params.pred_weight.shape().to_vec());
    let (_, _, b) = batch(2, 3);
    let mut g = Graph::new();
    let p = model.params.map(|t| g.constant_ref(t));
    let (hidden, _) = model.run(&b.token_windows()).unwrap();
    let h = g.constant(hidden);
    let mean = cloze_loss(&mut g, &p, h, &b, 6, Reduction::Mean).unwrap();
    let sum = cloze_loss(&mut g, &p, h, &b, 6, Reduction::Sum).unwrap();
    assert!((g.value(mean).item() - 2.0 * LN_2).abs() < 1e-12);
    assert!((g.value(sum).item() - 2.0 * LN_2 * b.num_masked() as f64).abs() < 1e-12);
}

#[test]
fn cloze_loss_matches_explicit_sum() {
    let model = Model::init(config(), 2).unwrap();
    let (_, _, b) = batch(3, 4);
    let (hidden, _) = model.run(&b.token_windows()).unwrap();
    let mut want = 0.0;
    for (vi, v) in b.views.iter().enumerate() {
        for ((&pos, &tgt), &neg) in v.positions.iter().zip(&v.targets).zip(&v.negatives) {
            let h = hidden.row(vi * 6 + pos);
            let logit = |item: usize| {
                let w = model.params.pred_weight.row(item - 2);
                w.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() + model.params.pred_bias.data()[item - 2]
            };
            want += softplus(-logit(tgt)) + softplus(logit(neg));
        }
    }
    let mut g = Graph::new();
    let p = model.params.map(|t| g.constant_ref(t));
    let h = g.constant(hidden.clone());
    let sum = cloze_loss(&mut g, &p, h, &b, 6, Reduction::Sum).unwrap();
    assert!((g.value(sum).item() - want).abs() < 1e-10);
}

#[test]
fn identical_views_with_orthogonal_negatives() {
    // Window 0 views are both e0, window 1 views are both e1.
    let reps = Tensor::new([4, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
    let mut g = Graph::new();
    let r = g.constant(reps);
    let l = pair_contrastive_terms(&mut g, r, 2, 2, 0, 1, 1.0).unwrap();
    let want = (1.0 + 2.0 / E).ln();
    for &v in g.value(l).data() {
        assert!((v - want).abs() < 1e-12);
    }
    assert!((want - 0.551_444_714).abs() < 1e-9);
}

#[test]
fn uniform_similarity_gives_log_2n_minus_1() {
    for (n, m) in [(2, 2), (3, 4), (5, 3)] {
        let reps = Tensor::full([n * m, 5], 0.7);
        let plan = ContrastivePlan::new(n, m).unwrap();
        let mut g = Graph::new();
        let r = g.constant(reps);
        let mean = multi_pair_contrastive_loss(&mut g, r, &plan, 0.5, Reduction::Mean).unwrap();
        let sum = multi_pair_contrastive_loss(&mut g, r, &plan, 0.5, Reduction::Sum).unwrap();
        let per = ((2 * n - 1) as f64).ln();
        assert!((g.value(mean).item() - per).abs() < 1e-12);
        assert!((g.value(sum).item() - per * (n * m * (m - 1)) as f64).abs() < 1e-10);
    }
}

#[test]
fn fewer_than_two_views_is_rejected() {
    assert!(ContrastivePlan::new(3, 1).is_err());
    let obj = ObjectiveConfig {
        num_views: 1,
        ..ObjectiveConfig::default()
    };
    assert!(obj.validate().is_err());
    let cloze_only = ObjectiveConfig {
        contrastive: false,
        ..obj
    };
    assert!(cloze_only.validate().is_ok());
}

#[test]
fn joint_gradient_is_the_weighted_sum() {
    let model = Model::init(config(), 5).unwrap();
    let (_, _, b) = batch(2, 6);
    let obj = ObjectiveConfig::default();
    let theta = 0.37;
    let grads = |which: usize| {
        let mut g = Graph::new();
        let p = model.params.map(|t| g.param(t));
        let l = step_losses(&mut g, &p, &model.config, &obj, &b, theta, true, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let target = [l.main, l.cl.unwrap(), l.joint][which];
        let gr = g.backward(target).unwrap();
        p.values().into_iter().map(|&v| gr.wrt(v)).collect::<Vec<_>>()
    };
    let (main, cl, joint) = (grads(0), grads(1), grads(2));
    for ((a, b), c) in main.iter().zip(&cl).zip(&joint) {
        for ((x, y), z) in a.data().iter().zip(b.data()).zip(c.data()) {
            assert!((x + theta * y - z).abs() < 1e-12 * (1.0 + z.abs()));
        }
    }
}

#[test]
fn zero_weight_joint_is_the_cloze_loss() {
    let mut g = Graph::new();
    let a = g.variable(Tensor::scalar(1.5));
    let b = g.variable(Tensor::scalar(4.0));
    assert_eq!(joint_loss(&mut g, a, b, 0.0).unwrap(), a);
    let j = joint_loss(&mut g, a, b, 0.25).unwrap();
    assert_eq!(g.value(j).item(), 2.5);
}

#[test]
fn cloze_only_step_has_no_contrastive_term() {
    let model = Model::init(config(), 5).unwrap();
    let (_, _, b) = batch(2, 6);
    let obj = ObjectiveConfig {
        contrastive: false,
        ..ObjectiveConfig::default()
    };
    let mut g = Graph::new();
    let p = model.params.map(|t| g.constant_ref(t));
    let l = step_losses(&mut g, &p, &model.config, &obj, &b, 0.5, false, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(l.cl.is_none());
    assert_eq!(l.joint, l.main);
}

#[test]
fn mean_pooling_is_supported() {
    let model = Model::init(config(), 5).unwrap();
    let (_, _, b) = batch(2, 6);
    let obj = ObjectiveConfig {
        pooling: Pooling::Mean,
        ..ObjectiveConfig::default()
    };
    let mut g = Graph::new();
    let p = model.params.map(|t| g.constant_ref(t));
    let l = step_losses(&mut g, &p, &model.config, &obj, &b, 0.5, false, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let cl = g.value(l.cl.unwrap()).item();
    assert!(cl.is_finite() && cl >= 0.0);
}

#[test]
fn views_are_drawn_independently() {
    let seq: Vec<usize> = (2..22).collect();
    let w = TrainingWindow::padded(&seq, 20, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut same, mut both, mut first, mut second) = (0, 0usize, 0usize, 0usize);
    let trials = 20_000;
    for _ in 0..trials {
        let v = gen_masked_views(&w, &seq, 60, 0.15, 2, &mut rng).unwrap();
        same += usize::from(v[0].positions == v[1].positions);
        let a = v[0].positions.contains(&7);
        let b = v[1].positions.contains(&7);
        first += usize::from(a);
        second += usize::from(b);
        both += usize::from(a && b);
    }
    assert!(same < trials / 100);
    let (pa, pb, pab) = (
        first as f64 / trials as f64,
        second as f64 / trials as f64,
        both as f64 / trials as f64,
    );
    assert!((pab - pa * pb).abs() < 0.01, "{pab} vs {}", pa * pb);
}

#[test]
fn negatives_are_uniform_over_unseen_items() {
    let seen = vec![2, 3, 5, 8];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut counts = [0usize; 12];
    let draws = 80_000;
    for _ in 0..draws {
        counts[sample_negative(&seen, 10, &mut rng)] += 1;
    }
    for (item, &c) in counts.iter().enumerate() {
        if (2..12).contains(&item) && !seen.contains(&item) {
            let f = c as f64 / draws as f64;
            assert!((f - 1.0 / 6.0).abs() < 0.01, "item {item}: {f}");
        } else {
            assert_eq!(c, 0);
        }
    }
}

#[test]
fn saturated_users_are_reported() {
    let seq: Vec<usize> = (2..7).collect();
    let w = TrainingWindow::padded(&seq, 6, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(gen_masked_views(&w, &seq, 5, 0.2, 2, &mut rng).is_err());
}

#[test]
fn theta_zero_denominator_targets_zero() {
    let mut s = ThetaState::new(0.5, 2.0).unwrap();
    assert_eq!(s.update(0.0, 0.0).unwrap(), 0.0);
    assert!(s.update(f64::NAN, 1.0).is_err());
    assert!(ThetaState::new(1.5, 1.0).is_err());
    assert!(ThetaState::new(0.5, 0.0).is_err());
}

#[test]
fn theta_three_step_trace() {
    let mut s = ThetaState::new(0.5, 1.0).unwrap();
    let trace: Vec<f64> = [(1.0, 1.0), (3.0, 1.0), (1.0, 3.0)]
        .iter()
        .map(|&(a, b)| s.update(a, b).unwrap())
        .collect();
    assert_eq!(trace, [0.25, 0.5, 0.375]);
    assert_eq!(s.step, 3);
}

proptest! {
    #[test]
    fn pair_terms_are_non_negative(seed in 0u64..500, n in 1usize..5, m in 2usize..5, tau in 0.05f64..5.0) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reps = Tensor::from_fn([n * m, 4], |_| rng.random_range(-1.0..1.0));
        let plan = ContrastivePlan::new(n, m).unwrap();
        let mut g = Graph::new();
        let r = g.constant(reps);
        let l = multi_pair_contrastive_loss(&mut g, r, &plan, tau, Reduction::Sum).unwrap();
        prop_assert!(g.value(l).item() >= 0.0);
    }

    #[test]
    fn contrastive_loss_is_scale_invariant(seed in 0u64..500, row in 0usize..6, c in 0.01f64..100.0) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reps = Tensor::from_fn([6, 4], |_| rng.random_range(-1.0..1.0));
        let mut scaled = reps.clone();
        scaled.data_mut()[row * 4..row * 4 + 4].iter_mut().for_each(|v| *v *= c);
        let plan = ContrastivePlan::new(3, 2).unwrap();
        let mut g = Graph::new();
        let a = g.constant(reps);
        let b = g.constant(scaled);
        let la = multi_pair_contrastive_loss(&mut g, a, &plan, 0.7, Reduction::Mean).unwrap();
        let lb = multi_pair_contrastive_loss(&mut g, b, &plan, 0.7, Reduction::Mean).unwrap();
        prop_assert!((g.value(la).item() - g.value(lb).item()).abs() < 1e-12);
    }

    #[test]
    fn masked_views_keep_unmasked_tokens(seed in 0u64..1000, len in 1usize..12, m in 1usize..4) {
        let seq: Vec<usize> = (2..2 + len).collect();
        let w = TrainingWindow::padded(&seq, 12, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in gen_masked_views(&w, &seq, 40, 0.15, m, &mut rng).unwrap() {
            prop_assert!(!v.positions.is_empty());
            prop_assert!(v.positions.windows(2).all(|p| p[0] < p[1]));
            for i in 0..12 {
                if let Ok(k) = v.positions.binary_search(&i) {
                    prop_assert_eq!(v.tokens[i], 1);
                    prop_assert_eq!(v.targets[k], w.tokens[i]);
                    prop_assert!(i >= w.valid_from);
                } else {
                    prop_assert_eq!(v.tokens[i], w.tokens[i]);
                }
            }
        }
    }
}
