//! Whole-catalogue next-item ranking, HR@K / NDCG@K, and attention export.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use cbit_tensor::{Graph, Tensor};
use rayon::prelude::*;

use crate::data::{truncate_for_inference, EvalCase, TrainingWindow, FIRST_ITEM, MASK};
use crate::encoder::{encode, predict_logits, Model, NoRng};
use crate::error::{Error, Result};

pub const DEFAULT_KS: [usize; 3] = [5, 10, 20];

/// Last `T - 1` items of `history`, then the mask token, pre-padded to `T`.
pub fn inference_window(history: &[usize], max_len: usize) -> Result<Vec<usize>> {
    if history.is_empty() {
        return Err(Error::data("cannot score an empty history"));
    }
    let mut items = truncate_for_inference(history, max_len).to_vec();
    items.push(MASK);
    Ok(TrainingWindow::padded(&items, max_len, 0).tokens)
}

/// Logits over all real items (index `i` is item `i + 2`) for the position
/// after each history.
pub fn next_item_scores_batch(model: &Model, histories: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
    if histories.is_empty() {
        return Ok(Vec::new());
    }
    let t = model.config.max_len;
    let windows = histories
        .iter()
        .map(|h| inference_window(h, t))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[usize]> = windows.iter().map(Vec::as_slice).collect();
    let mut g = Graph::new();
    let p = model.params.map(|x| g.constant_ref(x));
    let enc = encode(&mut g, &p, &model.config, &refs, false, &mut NoRng)?;
    let last: Vec<usize> = (0..refs.len()).map(|b| b * t + t - 1).collect();
    let h = g.gather_rows(enc.hidden, &last)?;
    let logits = predict_logits(&mut g, &p, h)?;
    let n = model.config.num_items;
    Ok(g.value(logits).data().chunks(n).map(<[f64]>::to_vec).collect())
}

pub fn next_item_scores(model: &Model, history: &[usize]) -> Result<Vec<f64>> {
    Ok(next_item_scores_batch(model, &[history])?.swap_remove(0))
}

/// 1-based rank of `scores[target]`; ties go to the lower index.
pub fn rank_of_target(scores: &[f64], target: usize) -> usize {
    rank_excluding(scores, target, &[])
}

/// As [`rank_of_target`], ignoring the (sorted) indices in `excluded`.
pub fn rank_excluding(scores: &[f64], target: usize, excluded: &[usize]) -> usize {
    let s = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &v)| (v > s || (v == s && i < target)) && excluded.binary_search(&i).is_err())
        .count()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankingResult {
    pub user: usize,
    /// Dense item id.
    pub target: usize,
    pub rank: usize,
}

/// `(HR@K, NDCG@K)` over 1-based ranks.
pub fn hr_ndcg(ranks: &[usize], k: usize) -> (f64, f64) {
    if ranks.is_empty() {
        return (0.0, 0.0);
    }
    let (mut hits, mut gain) = (0usize, 0.0);
    for &r in ranks {
        if r <= k {
            hits += 1;
            gain += 1.0 / ((r + 1) as f64).log2();
        }
    }
    let n = ranks.len() as f64;
    (hits as f64 / n, gain / n)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub users: usize,
    /// `K → (HR@K, NDCG@K)`
    pub metrics: BTreeMap<usize, (f64, f64)>,
}

impl MetricsReport {
    pub fn from_ranks(ranks: &[usize], ks: &[usize]) -> Self {
        Self {
            users: ranks.len(),
            metrics: ks.iter().map(|&k| (k, hr_ndcg(ranks, k))).collect(),
        }
    }

    pub fn hr(&self, k: usize) -> Option<f64> {
        self.metrics.get(&k).map(|m| m.0)
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.metrics.get(&k).map(|m| m.1)
    }

    /// `split K HR NDCG` lines.
    pub fn tsv_lines(&self, split: &str) -> Vec<String> {
        self.metrics
            .iter()
            .map(|(k, (hr, ndcg))| format!("{split}\t{k}\t{hr:.6}\t{ndcg:.6}"))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    /// Drop the context's other items from the candidate set.
    pub filter_seen: bool,
    /// Histories forwarded together.
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ks: DEFAULT_KS.to_vec(),
            filter_seen: false,
            batch_size: 64,
        }
    }
}

/// Ranks every case's target; results are in case order.
pub fn rank_cases(model: &Model, cases: &[EvalCase], opts: &EvalOptions) -> Result<Vec<RankingResult>> {
    let n = model.config.num_items;
    if let Some(c) = cases.iter().find(|c| !(FIRST_ITEM..n + FIRST_ITEM).contains(&c.target)) {
        return Err(Error::data(format!(
            "user {}: target {} outside a model of {n} items",
            c.user, c.target
        )));
    }
    let chunks: Vec<Vec<RankingResult>> = cases
        .par_chunks(opts.batch_size.max(1))
        .map(|chunk| {
            let histories: Vec<&[usize]> = chunk.iter().map(|c| c.context.as_slice()).collect();
            let scores = next_item_scores_batch(model, &histories)?;
            Ok(chunk
                .iter()
                .zip(scores)
                .map(|(c, s)| {
                    let target = c.target - FIRST_ITEM;
                    let rank = if opts.filter_seen {
                        let mut seen: Vec<usize> = c
                            .context
                            .iter()
                            .map(|&i| i - FIRST_ITEM)
                            .filter(|&i| i != target)
                            .collect();
                        seen.sort_unstable();
                        seen.dedup();
                        rank_excluding(&s, target, &seen)
                    } else {
                        rank_of_target(&s, target)
                    };
                    RankingResult {
                        user: c.user,
                        target: c.target,
                        rank,
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

pub fn evaluate_split(model: &Model, cases: &[EvalCase], opts: &EvalOptions) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(Error::data("no evaluation cases"));
    }
    let ranks: Vec<usize> = rank_cases(model, cases, opts)?.iter().map(|r| r.rank).collect();
    Ok(MetricsReport::from_ranks(&ranks, &opts.ks))
}

/// Element-wise mean of the attention maps of `windows`, `[layer][head]`.
pub fn average_attention(model: &Model, windows: &[&[usize]]) -> Result<Vec<Vec<Tensor>>> {
    if windows.is_empty() {
        return Err(Error::data("no windows to average attention over"));
    }
    let t = model.config.max_len;
    let (_, attn) = model.run(windows)?;
    let n = windows.len() as f64;
    Ok(attn
        .into_iter()
        .map(|layer| {
            layer
                .into_iter()
                .map(|a| {
                    let mut mean = vec![0.0; t * t];
                    for block in a.data().chunks(t * t) {
                        for (m, v) in mean.iter_mut().zip(block) {
                            *m += v;
                        }
                    }
                    Tensor::from_fn([t, t], |i| mean[i] / n)
                })
                .collect()
        })
        .collect())
}

/// Mean over heads of each layer's maps.
pub fn head_mean(maps: &[Vec<Tensor>]) -> Vec<Tensor> {
    maps.iter()
        .map(|heads| {
            let n = heads.len() as f64;
            let shape = heads[0].shape().to_vec();
            Tensor::from_fn(shape, |i| heads.iter().map(|h| h.data()[i]).sum::<f64>() / n)
        })
        .collect()
}

/// Plain-text matrices, one `# layer l head h` block each; with
/// `include_head_mean` a `# layer l head mean` block follows every layer.
pub fn write_attention<W: Write>(w: &mut W, maps: &[Vec<Tensor>], include_head_mean: bool) -> io::Result<()> {
    let means = include_head_mean.then(|| head_mean(maps));
    let write_matrix = |w: &mut W, m: &Tensor| -> io::Result<()> {
        for r in 0..m.rows() {
            let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:.10}")).collect();
            writeln!(w, "{}", row.join(" "))?;
        }
        Ok(())
    };
    for (l, heads) in maps.iter().enumerate() {
        for (h, m) in heads.iter().enumerate() {
            writeln!(w, "# layer {l} head {h}")?;
            write_matrix(w, m)?;
        }
        if let Some(means) = &means {
            writeln!(w, "# layer {l} head mean")?;
            write_matrix(w, &means[l])?;
        }
    }
    Ok(())
}

/// Averages attention over the inference windows of `histories` and writes
/// it to `path`.
pub fn export_attention(
    model: &Model,
    histories: &[&[usize]],
    path: &Path,
    include_head_mean: bool,
) -> Result<Vec<Vec<Tensor>>> {
    let windows = histories
        .iter()
        .map(|h| inference_window(h, model.config.max_len))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[usize]> = windows.iter().map(Vec::as_slice).collect();
    let maps = average_attention(model, &refs)?;
    let mut w = BufWriter::new(File::create(path)?);
    write_attention(&mut w, &maps, include_head_mean)?;
    w.flush()?;
    Ok(maps)
}
