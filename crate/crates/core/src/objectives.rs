//! Training objectives: cloze masking with sampled negatives, the cloze
//! loss, multi-pair InfoNCE over masked views, and adaptive loss weighting.

use std::collections::BTreeSet;

use cbit_tensor::{ContrastiveTerm, Graph, Var};
use rand::Rng;

use crate::data::{TrainingWindow, FIRST_ITEM, MASK};
use crate::encoder::{encode, item_logits, ModelConfig, ModelParams};
use crate::error::{Error, Result};

/// How per-position and per-pair terms are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// How a `[T × d]` hidden matrix becomes one vector for similarity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Pooling {
    #[default]
    Flatten,
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub mask_prob: f64,
    pub num_views: usize,
    pub tau: f64,
    pub pooling: Pooling,
    pub reduction: Reduction,
    /// When false only the cloze loss is computed.
    pub contrastive: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            mask_prob: 0.15,
            num_views: 2,
            tau: 1.0,
            pooling: Pooling::Flatten,
            reduction: Reduction::Mean,
            contrastive: true,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return Err(Error::config(format!("mask_prob must lie in (0, 1), got {}", self.mask_prob)));
        }
        if self.num_views == 0 {
            return Err(Error::config("num_views must be positive"));
        }
        if self.contrastive && self.num_views < 2 {
            return Err(Error::config("contrastive learning needs at least 2 views"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// One masked copy of a window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedView {
    pub tokens: Vec<usize>,
    /// Masked positions, ascending.
    pub positions: Vec<usize>,
    /// Original token at each masked position.
    pub targets: Vec<usize>,
    /// One sampled item per masked position, never in the user's history.
    pub negatives: Vec<usize>,
}

/// Draws an item uniformly from those absent from `seen` (sorted).
pub fn sample_negative<R: Rng + ?Sized>(seen: &[usize], num_items: usize, rng: &mut R) -> usize {
    loop {
        let c = rng.random_range(FIRST_ITEM..num_items + FIRST_ITEM);
        if seen.binary_search(&c).is_err() {
            return c;
        }
    }
}

/// `m` independent cloze maskings of `window`. Each non-padding position is
/// masked with probability `mask_prob`; a draw with no masks gets one
/// position forced uniformly. `seen` is the sorted item set of the user.
pub fn gen_masked_views<R: Rng + ?Sized>(
    window: &TrainingWindow,
    seen: &[usize],
    num_items: usize,
    mask_prob: f64,
    m: usize,
    rng: &mut R,
) -> Result<Vec<MaskedView>> {
    if !(mask_prob > 0.0 && mask_prob < 1.0) {
        return Err(Error::config(format!("mask_prob must lie in (0, 1), got {mask_prob}")));
    }
    let valid = window.valid_from..window.tokens.len();
    if valid.is_empty() {
        return Err(Error::data(format!("window of user {} is all padding", window.source_user)));
    }
    if seen.len() >= num_items {
        return Err(Error::data(format!(
            "user {} has interacted with every item, no negative can be sampled",
            window.source_user
        )));
    }
    let mut views = Vec::with_capacity(m);
    for _ in 0..m {
        let mut positions: Vec<usize> = valid.clone().filter(|_| rng.random::<f64>() < mask_prob).collect();
        if positions.is_empty() {
            positions.push(rng.random_range(valid.clone()));
        }
        let mut tokens = window.tokens.clone();
        let mut targets = Vec::with_capacity(positions.len());
        let mut negatives = Vec::with_capacity(positions.len());
        for &p in &positions {
            targets.push(tokens[p]);
            tokens[p] = MASK;
            negatives.push(sample_negative(seen, num_items, rng));
        }
        views.push(MaskedView {
            tokens,
            positions,
            targets,
            negatives,
        });
    }
    Ok(views)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedViewBatch {
    /// Window-major: view `j` of window `u` is `views[u * views_per_window + j]`.
    pub views: Vec<MaskedView>,
    pub windows: usize,
    pub views_per_window: usize,
    pub mask_prob: f64,
}

impl MaskedViewBatch {
    /// `user_items[u]` is the sorted item set of user `u`.
    pub fn generate<R: Rng + ?Sized>(
        windows: &[&TrainingWindow],
        user_items: &[Vec<usize>],
        num_items: usize,
        mask_prob: f64,
        m: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut views = Vec::with_capacity(windows.len() * m);
        for w in windows {
            let seen = user_items
                .get(w.source_user)
                .ok_or_else(|| Error::data(format!("no item set for user {}", w.source_user)))?;
            views.extend(gen_masked_views(w, seen, num_items, mask_prob, m, rng)?);
        }
        Ok(Self {
            views,
            windows: windows.len(),
            views_per_window: m,
            mask_prob,
        })
    }

    pub fn token_windows(&self) -> Vec<&[usize]> {
        self.views.iter().map(|v| v.tokens.as_slice()).collect()
    }

    pub fn num_masked(&self) -> usize {
        self.views.iter().map(|v| v.positions.len()).sum()
    }

    /// Hidden-state rows (`view · T + position`), targets and negatives of
    /// every masked position, in view order.
    pub fn masked_rows(&self, max_len: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let n = self.num_masked();
        let (mut rows, mut targets, mut negs) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for (vi, v) in self.views.iter().enumerate() {
            rows.extend(v.positions.iter().map(|p| vi * max_len + p));
            targets.extend_from_slice(&v.targets);
            negs.extend_from_slice(&v.negatives);
        }
        (rows, targets, negs)
    }
}

/// `softplus(-P(target)) + softplus(P(negative))` over masked positions,
/// i.e. the binary cross-entropy of one positive against one negative.
pub fn cloze_loss(
    g: &mut Graph<'_>,
    p: &ModelParams<Var>,
    hidden: Var,
    batch: &MaskedViewBatch,
    max_len: usize,
    reduction: Reduction,
) -> Result<Var> {
    let (rows, targets, negs) = batch.masked_rows(max_len);
    if rows.is_empty() {
        return Err(Error::data("cloze loss over an empty mask set"));
    }
    let pos = item_logits(g, p, hidden, &rows, &targets)?;
    let neg = item_logits(g, p, hidden, &rows, &negs)?;
    let flipped = g.neg(pos)?;
    let lp = g.softplus(flipped)?;
    let ln = g.softplus(neg)?;
    let sp = g.sum(lp)?;
    let sn = g.sum(ln)?;
    let total = g.add(sp, sn)?;
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => g.scale(total, 1.0 / rows.len() as f64)?,
    })
}

/// Index bookkeeping for InfoNCE over `views` masked copies of each of
/// `windows` sequences, laid out window-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastivePlan {
    pub windows: usize,
    pub views: usize,
    /// Ordered by anchor user, then anchor view `x`, then positive view `y`.
    pub terms: Vec<ContrastiveTerm>,
}

impl ContrastivePlan {
    pub fn new(windows: usize, views: usize) -> Result<Self> {
        if views < 2 {
            return Err(Error::config(format!("multi-pair contrastive loss needs m >= 2, got {views}")));
        }
        if windows == 0 {
            return Err(Error::config("contrastive loss over an empty batch"));
        }
        let mut terms = Vec::with_capacity(windows * views * (views - 1));
        for u in 0..windows {
            for x in 0..views {
                for y in (0..views).filter(|&y| y != x) {
                    terms.push(pair_term(windows, views, u, x, y));
                }
            }
        }
        Ok(Self { windows, views, terms })
    }

    pub fn row(&self, window: usize, view: usize) -> usize {
        window * self.views + view
    }

    pub fn terms_for_window(&self, u: usize) -> &[ContrastiveTerm] {
        let per = self.views * (self.views - 1);
        &self.terms[u * per..(u + 1) * per]
    }

    /// Every representation used as a negative by any term anchored at `u`.
    pub fn distinct_negatives(&self, u: usize) -> BTreeSet<usize> {
        self.terms_for_window(u)
            .iter()
            .flat_map(|t| t.negatives.iter().copied())
            .collect()
    }
}

/// Anchor view `x` of window `u`, positive view `y` of the same window,
/// negatives views `x` and `y` of every other window.
fn pair_term(windows: usize, views: usize, u: usize, x: usize, y: usize) -> ContrastiveTerm {
    let mut negatives = Vec::with_capacity(2 * windows.saturating_sub(1));
    for k in (0..windows).filter(|&k| k != u) {
        negatives.push(k * views + x);
        negatives.push(k * views + y);
    }
    ContrastiveTerm {
        anchor: u * views + x,
        positive: u * views + y,
        negatives,
    }
}

/// One vector per view: `[M·T × d]` hidden states to `[M × F]`.
pub fn view_representations(g: &mut Graph<'_>, hidden: Var, max_len: usize, pooling: Pooling) -> Result<Var> {
    let sh = g.shape(hidden).to_vec();
    let (rows, d) = (sh[0], sh[1]);
    if rows % max_len != 0 {
        return Err(Error::config(format!("{rows} hidden rows are not a multiple of max_len {max_len}")));
    }
    Ok(match pooling {
        Pooling::Flatten => g.reshape(hidden, [rows / max_len, max_len * d])?,
        Pooling::Mean => g.mean_row_blocks(hidden, max_len)?,
    })
}

/// Cosine-similarity matrix of the rows of `reps`.
pub fn similarity(g: &mut Graph<'_>, reps: Var) -> Result<Var> {
    let z = g.normalize_rows(reps)?;
    Ok(g.matmul_nt(z, z)?)
}

/// `ℓ(H^x, H^y)` for every window, as a vector of length `windows`.
pub fn pair_contrastive_terms(
    g: &mut Graph<'_>,
    reps: Var,
    windows: usize,
    views: usize,
    x: usize,
    y: usize,
    tau: f64,
) -> Result<Var> {
    if x == y || x >= views || y >= views {
        return Err(Error::config(format!("invalid view pair ({x}, {y}) for m = {views}")));
    }
    let terms = (0..windows).map(|u| pair_term(windows, views, u, x, y)).collect();
    let sim = similarity(g, reps)?;
    Ok(g.contrastive_terms(sim, terms, tau)?)
}

/// Sum (or mean) of `ℓ(H^x, H^y)` over all ordered view pairs `x ≠ y` and
/// all windows.
pub fn multi_pair_contrastive_loss(
    g: &mut Graph<'_>,
    reps: Var,
    plan: &ContrastivePlan,
    tau: f64,
    reduction: Reduction,
) -> Result<Var> {
    let m = g.shape(reps)[0];
    if m != plan.windows * plan.views {
        return Err(Error::config(format!(
            "{m} representations for {} windows of {} views",
            plan.windows, plan.views
        )));
    }
    let sim = similarity(g, reps)?;
    let terms = g.contrastive_terms(sim, plan.terms.clone(), tau)?;
    let total = g.sum(terms)?;
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => g.scale(total, 1.0 / plan.terms.len() as f64)?,
    })
}

/// Adaptive weight of the contrastive loss, updated once per optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct ThetaState {
    pub theta: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub step: u64,
}

impl ThetaState {
    pub fn new(alpha: f64, lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::config(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be positive, got {lambda}")));
        }
        Ok(Self {
            theta: 0.0,
            alpha,
            lambda,
            step: 0,
        })
    }

    /// `main / (main + λ·cl)`, or 0 when the denominator vanishes.
    pub fn target(&self, main: f64, cl: f64) -> f64 {
        let denom = main + self.lambda * cl;
        if denom == 0.0 {
            log::warn!("loss reweighting: main + lambda * cl == 0, using theta_hat = 0");
            0.0
        } else {
            main / denom
        }
    }

    /// Moves `theta` toward the current target at rate `alpha`. Takes
    /// detached loss values.
    pub fn update(&mut self, main: f64, cl: f64) -> Result<f64> {
        if !(main.is_finite() && cl.is_finite() && main >= 0.0 && cl >= 0.0) {
            return Err(Error::Numeric(format!(
                "theta update needs finite non-negative losses, got main={main} cl={cl}"
            )));
        }
        let hat = self.target(main, cl);
        self.theta = self.alpha * hat + (1.0 - self.alpha) * self.theta;
        self.step += 1;
        Ok(self.theta)
    }
}

/// `main + θ·cl`, with `θ` a constant. A zero weight returns `main` itself so
/// the gradient is exactly the cloze-only gradient.
pub fn joint_loss(g: &mut Graph<'_>, main: Var, cl: Var, theta: f64) -> Result<Var> {
    if theta == 0.0 {
        return Ok(main);
    }
    let weighted = g.scale(cl, theta)?;
    Ok(g.add(main, weighted)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub main: f64,
    pub cl: f64,
    pub theta: f64,
    pub joint: f64,
}

pub struct StepLosses {
    pub main: Var,
    pub cl: Option<Var>,
    pub joint: Var,
    pub hidden: Var,
}

impl StepLosses {
    pub fn report(&self, g: &Graph<'_>, theta: f64) -> LossReport {
        LossReport {
            main: g.value(self.main).item(),
            cl: self.cl.map_or(0.0, |c| g.value(c).item()),
            theta,
            joint: g.value(self.joint).item(),
        }
    }
}

/// Forwards every view of `batch` and records the cloze, contrastive and
/// joint losses.
#[allow(clippy::too_many_arguments)]
pub fn step_losses<R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    obj: &ObjectiveConfig,
    batch: &MaskedViewBatch,
    theta: f64,
    training: bool,
    rng: &mut R,
) -> Result<StepLosses> {
    let enc = encode(g, p, cfg, &batch.token_windows(), training, rng)?;
    let main = cloze_loss(g, p, enc.hidden, batch, cfg.max_len, obj.reduction)?;
    let (cl, joint) = if obj.contrastive {
        let plan = ContrastivePlan::new(batch.windows, batch.views_per_window)?;
        let reps = view_representations(g, enc.hidden, cfg.max_len, obj.pooling)?;
        let cl = multi_pair_contrastive_loss(g, reps, &plan, obj.tau, obj.reduction)?;
        (Some(cl), joint_loss(g, main, cl, theta)?)
    } else {
        (None, main)
    };
    Ok(StepLosses {
        main,
        cl,
        joint,
        hidden: enc.hidden,
    })
}
