use cbit_core::data::EvalCase;
use cbit_core::encoder::{Model, ModelConfig};
use cbit_core::eval::{
    average_attention, evaluate_split, export_attention, head_mean, hr_ndcg, inference_window, next_item_scores,
    next_item_scores_batch, rank_cases, rank_excluding, rank_of_target, EvalOptions, MetricsReport,
};
use cbit_core::tensor::Tensor;
use proptest::prelude::*;

fn config(num_items: usize) -> ModelConfig {
    ModelConfig {
        max_len: 6,
        dim: 8,
        layers: 2,
        heads: 2,
        num_items,
        dropout: 0.3,
        key_padding_mask: false,
        init_std: 0.2,
    }
}

fn cases(n: usize, num_items: usize) -> Vec<EvalCase> {
    (0..n)
        .map(|u| EvalCase {
            user: u,
            context: (0..3 + u % 9).map(|k| 2 + (u * 7 + k * 3) % num_items).collect(),
            target: 2 + u % num_items,
        })
        .collect()
}

#[test]
fn constant_scores_rank_by_index() {
    let mut model = Model::init(config(100), 1).unwrap();
    model.params.pred_weight = Tensor::zeros(model.params.pred_weight.shape().to_vec());
    let cs = cases(200, 100);
    let report = evaluate_split(&model, &cs, &EvalOptions::default()).unwrap();
    assert_eq!(report.hr(10), Some(0.1));
    assert_eq!(report.hr(20), Some(0.2));
    for r in rank_cases(&model, &cs, &EvalOptions::default()).unwrap() {
        assert_eq!(r.rank, r.target - 1);
    }
}

#[test]
fn a_model_that_knows_the_target_scores_perfectly() {
    let mut model = Model::init(config(30), 1).unwrap();
    model.params.pred_weight = Tensor::zeros(model.params.pred_weight.shape().to_vec());
    model.params.pred_bias.data_mut()[17] = 5.0;
    let cs: Vec<EvalCase> = cases(40, 30)
        .into_iter()
        .map(|c| EvalCase { target: 19, ..c })
        .collect();
    let report = evaluate_split(&model, &cs, &EvalOptions::default()).unwrap();
    for k in [5, 10, 20] {
        assert_eq!(report.hr(k), Some(1.0));
        assert_eq!(report.ndcg(k), Some(1.0));
    }
}

#[test]
fn results_do_not_depend_on_case_order_or_batching() {
    let model = Model::init(config(25), 3).unwrap();
    let cs = cases(50, 25);
    let mut reversed = cs.clone();
    reversed.reverse();
    let small = EvalOptions {
        batch_size: 1,
        ..EvalOptions::default()
    };
    let a = rank_cases(&model, &cs, &EvalOptions::default()).unwrap();
    let b = rank_cases(&model, &reversed, &small).unwrap();
    let mut b_sorted = b.clone();
    b_sorted.sort_by_key(|r| r.user);
    assert_eq!(a, b_sorted);
    let (ra, rb) = (
        evaluate_split(&model, &cs, &EvalOptions::default()).unwrap(),
        evaluate_split(&model, &reversed, &small).unwrap(),
    );
    for (k, (hr, ndcg)) in &ra.metrics {
        assert_eq!(rb.hr(*k), Some(*hr));
        assert!((rb.ndcg(*k).unwrap() - ndcg).abs() < 1e-15);
    }
}

#[test]
fn only_the_last_items_of_a_history_matter() {
    let model = Model::init(config(25), 4).unwrap();
    let long: Vec<usize> = (2..22).collect();
    let tail = &long[long.len() - 5..];
    assert_eq!(next_item_scores(&model, &long).unwrap(), next_item_scores(&model, tail).unwrap());
    assert_ne!(next_item_scores(&model, &long).unwrap(), next_item_scores(&model, &long[..19]).unwrap());
    let batch = next_item_scores_batch(&model, &[&long, tail]).unwrap();
    assert_eq!(batch[0], batch[1]);
    assert_eq!(batch[0].len(), 25);
    assert_eq!(inference_window(&long, 6).unwrap()[5], 1);
}

#[test]
fn filtering_seen_items_never_hurts_the_rank() {
    let model = Model::init(config(25), 5).unwrap();
    let cs = cases(60, 25);
    let plain = rank_cases(&model, &cs, &EvalOptions::default()).unwrap();
    let filtered = rank_cases(
        &model,
        &cs,
        &EvalOptions {
            filter_seen: true,
            ..EvalOptions::default()
        },
    )
    .unwrap();
    for (p, f) in plain.iter().zip(&filtered) {
        assert!(f.rank <= p.rank);
    }
}

#[test]
fn out_of_vocabulary_target_is_an_error() {
    let model = Model::init(config(10), 5).unwrap();
    let bad = vec![EvalCase {
        user: 0,
        context: vec![2, 3],
        target: 12,
    }];
    assert!(rank_cases(&model, &bad, &EvalOptions::default()).is_err());
    assert!(evaluate_split(&model, &[], &EvalOptions::default()).is_err());
}

#[test]
fn report_lines_are_tab_separated() {
    let r = MetricsReport::from_ranks(&[1, 3, 30], &[10]);
    assert_eq!(r.tsv_lines("test"), ["test\t10\t0.666667\t0.500000"]);
}

#[test]
fn averaged_attention_is_the_mean_of_single_maps() {
    let model = Model::init(config(20), 6).unwrap();
    let a = inference_window(&[2, 3, 4], 6).unwrap();
    let b = inference_window(&[5, 6, 7, 8, 9, 10, 11], 6).unwrap();
    let avg = average_attention(&model, &[&a, &b]).unwrap();
    let (ma, mb) = (model.attention_maps(&a).unwrap(), model.attention_maps(&b).unwrap());
    for l in 0..2 {
        for h in 0..2 {
            for i in 0..36 {
                let want = 0.5 * (ma[l][h].data()[i] + mb[l][h].data()[i]);
                assert!((avg[l][h].data()[i] - want).abs() < 1e-15);
            }
        }
    }
    let means = head_mean(&avg);
    assert!((means[1].data()[7] - 0.5 * (avg[1][0].data()[7] + avg[1][1].data()[7])).abs() < 1e-15);
}

#[test]
fn exported_attention_rows_sum_to_one() {
    let model = Model::init(config(20), 6).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("attn.txt");
    let hist: Vec<Vec<usize>> = (0..5).map(|u| (2 + u..8 + u).collect()).collect();
    let refs: Vec<&[usize]> = hist.iter().map(Vec::as_slice).collect();
    export_attention(&model, &refs, &path, true).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let headers: Vec<&str> = text.lines().filter(|l| l.starts_with('#')).collect();
    assert_eq!(
        headers,
        [
            "# layer 0 head 0",
            "# layer 0 head 1",
            "# layer 0 head mean",
            "# layer 1 head 0",
            "# layer 1 head 1",
            "# layer 1 head mean"
        ]
    );
    for line in text.lines().filter(|l| !l.starts_with('#')) {
        let vals: Vec<f64> = line.split(' ').map(|v| v.parse().unwrap()).collect();
        assert_eq!(vals.len(), 6);
        assert!((vals.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

proptest! {
    #[test]
    fn metrics_are_bounded_and_monotone(ranks in prop::collection::vec(1usize..60, 1..80)) {
        let mut prev = (0.0, 0.0);
        for k in 1..60 {
            let (hr, ndcg) = hr_ndcg(&ranks, k);
            prop_assert!((0.0..=1.0).contains(&hr));
            prop_assert!(ndcg <= hr + 1e-15);
            prop_assert!(hr >= prev.0 && ndcg >= prev.1);
            prev = (hr, ndcg);
        }
        prop_assert_eq!(hr_ndcg(&ranks, 1).0, hr_ndcg(&ranks, 1).1);
    }

    #[test]
    fn rank_is_a_permutation_position(scores in prop::collection::vec(-3i8..3, 1..40)) {
        let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
        let mut ranks: Vec<usize> = (0..s.len()).map(|i| rank_of_target(&s, i)).collect();
        ranks.sort_unstable();
        prop_assert_eq!(ranks, (1..=s.len()).collect::<Vec<_>>());
    }

    #[test]
    fn exclusion_removes_exactly_the_better_excluded(scores in prop::collection::vec(-3i8..3, 2..40), pick in 0usize..40) {
        let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
        let target = pick % s.len();
        let excluded: Vec<usize> = (0..s.len()).filter(|&i| i != target && i % 3 == 0).collect();
        let better = excluded.iter().filter(|&&i| s[i] > s[target] || (s[i] == s[target] && i < target)).count();
        prop_assert_eq!(rank_excluding(&s, target, &excluded), rank_of_target(&s, target) - better);
    }
}
