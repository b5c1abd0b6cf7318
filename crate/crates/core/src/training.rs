//! Optimisation loop: Adam with step-decayed learning rate, per-batch seeded
//! view generation, loss reweighting and best-checkpoint selection.

use cbit_tensor::{Graph, Parameters, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{EvalSplit, TrainingWindow};
use crate::encoder::{Model, ModelParams};
use crate::error::{Error, Result};
use crate::eval::{evaluate_split, EvalOptions};
use crate::objectives::{step_losses, LossReport, MaskedViewBatch, ObjectiveConfig, ThetaState};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub decay_gamma: f64,
    pub decay_every: usize,
    pub objective: ObjectiveConfig,
    pub alpha: f64,
    pub lambda: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub stride: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            epochs: 250,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            decay_gamma: 0.1,
            decay_every: 100,
            objective: ObjectiveConfig::default(),
            alpha: 0.1,
            lambda: 5.0,
            clip_norm: None,
            stride: 1,
            seed: 42,
        }
    }
}

impl TrainConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return fail(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if !(self.decay_gamma > 0.0 && self.decay_gamma.is_finite()) {
            return fail(format!("decay_gamma must be positive, got {}", self.decay_gamma));
        }
        if self.decay_every == 0 {
            return fail("decay_every must be positive".into());
        }
        if self.stride == 0 {
            return fail("stride must be positive".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return fail(format!("clip_norm must be positive, got {c}"));
            }
        }
        ThetaState::new(self.alpha, self.lambda)?;
        self.objective.validate()
    }
}

/// `base · gamma^⌊epoch / every⌋`, with `epoch` counted from zero.
pub fn lr_schedule(epoch: usize, base_lr: f64, gamma: f64, every: usize) -> f64 {
    base_lr * gamma.powi((epoch / every.max(1)) as i32)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for stream `(a, b)` under `base`.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ a) ^ b)
}

const INIT_STREAM: u64 = u64::MAX;
const SHUFFLE_STREAM: u64 = u64::MAX;

/// Seed for parameter initialisation under run seed `seed`.
pub fn init_seed(seed: u64) -> u64 {
    derive_seed(seed, INIT_STREAM, 0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first, &self.second)
    }

    /// One bias-corrected update. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step<P: Parameters + ?Sized>(&mut self, params: &mut P, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.count() {
            return Err(Error::config(format!(
                "{} gradients for {} parameter tensors",
                grads.len(),
                params.count()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params.tensor(i).shape() {
                return Err(Error::config(format!(
                    "gradient shape {:?} for {} of shape {:?}",
                    g.shape(),
                    params.name(i),
                    params.tensor(i).shape()
                )));
            }
            if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {} at index {pos} of {}",
                    g.data()[pos],
                    params.name(i)
                )));
            }
        }
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| Tensor::zeros(g.shape().to_vec())).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (self.first[i].data_mut(), self.second[i].data_mut());
            let p = params.tensor_mut(i).data_mut();
            for j in 0..g.numel() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub main: f64,
    pub cl: f64,
    pub theta: f64,
    pub lr: f64,
    pub val_hr10: f64,
    pub val_ndcg10: f64,
}

impl EpochRecord {
    pub const HEADER: &'static str = "epoch\tmain_loss\tcl_loss\ttheta\tlr\tval_hr10\tval_ndcg10";

    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:e}\t{:.6}\t{:.6}",
            self.epoch, self.main, self.cl, self.theta, self.lr, self.val_hr10, self.val_ndcg10
        )
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub best_epoch: usize,
    pub best_hr10: f64,
    pub best_ndcg10: f64,
    pub best_params: ModelParams,
    pub history: Vec<EpochRecord>,
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub theta: ThetaState,
    adam: Adam,
    windows: Vec<TrainingWindow>,
    user_items: Vec<Vec<usize>>,
    epoch: usize,
}

impl Trainer {
    /// `user_items[u]` is the sorted item set negatives must avoid for user `u`.
    pub fn new(
        model: Model,
        config: TrainConfig,
        windows: Vec<TrainingWindow>,
        user_items: Vec<Vec<usize>>,
    ) -> Result<Self> {
        config.validate()?;
        model.config.validate()?;
        if windows.is_empty() {
            return Err(Error::data("no training windows"));
        }
        let theta = ThetaState::new(config.alpha, config.lambda)?;
        let adam = Adam::new(config.beta1, config.beta2, config.adam_eps);
        Ok(Self {
            model,
            config,
            theta,
            adam,
            windows,
            user_items,
            epoch: 0,
        })
    }

    pub fn from_split(model: Model, config: TrainConfig, split: &EvalSplit) -> Result<Self> {
        let windows = split.training_windows(model.config.max_len, config.stride)?;
        Self::new(model, config, windows, split.user_item_sets())
    }

    pub fn windows(&self) -> &[TrainingWindow] {
        &self.windows
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn optimizer(&self) -> &Adam {
        &self.adam
    }

    pub fn current_lr(&self) -> f64 {
        let c = &self.config;
        lr_schedule(self.epoch, c.learning_rate, c.decay_gamma, c.decay_every)
    }

    /// Window indices of each batch of `epoch`, shuffled by a per-epoch seed.
    /// The last batch may be short.
    pub fn batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.windows.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, epoch as u64, SHUFFLE_STREAM));
        order.shuffle(&mut rng);
        order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// Masks, forwards and back-propagates one batch, applies Adam, then
    /// advances the loss weight from the detached loss values.
    pub fn train_step(&mut self, window_ids: &[usize], seed: u64, lr: f64) -> Result<LossReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obj = &self.config.objective;
        let wins: Vec<&TrainingWindow> = window_ids.iter().map(|&i| &self.windows[i]).collect();
        let batch = MaskedViewBatch::generate(
            &wins,
            &self.user_items,
            self.model.config.num_items,
            obj.mask_prob,
            obj.num_views,
            &mut rng,
        )?;
        let theta = self.theta.theta;
        let (report, mut grads) = {
            let mut g = Graph::new();
            let p = self.model.params.map(|t| g.param(t));
            let losses = step_losses(&mut g, &p, &self.model.config, obj, &batch, theta, true, &mut rng)?;
            let report = losses.report(&g, theta);
            if !report.joint.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {report:?}")));
            }
            let gr = g.backward(losses.joint)?;
            let grads: Vec<Tensor> = p.values().into_iter().map(|&v| gr.wrt(v)).collect();
            (report, grads)
        };
        if let Some(c) = self.config.clip_norm {
            clip_global_norm(&mut grads, c);
        }
        self.adam.step(&mut self.model.params, &grads, lr)?;
        if self.config.objective.contrastive {
            self.theta.update(report.main, report.cl)?;
        }
        Ok(report)
    }

    /// One pass over all windows; returns the per-step reports.
    pub fn train_epoch(&mut self) -> Result<Vec<LossReport>> {
        let lr = self.current_lr();
        let epoch = self.epoch;
        let mut reports = Vec::new();
        for (bi, ids) in self.batches(epoch).into_iter().enumerate() {
            let seed = derive_seed(self.config.seed, epoch as u64, bi as u64);
            reports.push(self.train_step(&ids, seed, lr)?);
        }
        self.epoch += 1;
        Ok(reports)
    }

    /// Trains for the configured number of epochs, validating after each.
    /// `validate` returns `(HR@10, NDCG@10)`; the earliest epoch with the
    /// highest NDCG@10 is kept. `observe` sees every record together with
    /// whether it is the new best and the current model.
    pub fn fit_with<V, O>(&mut self, mut validate: V, mut observe: O) -> Result<FitOutcome>
    where
        V: FnMut(&Model) -> Result<(f64, f64)>,
        O: FnMut(&EpochRecord, bool, &Model) -> Result<()>,
    {
        let mut best: Option<(usize, f64, f64, ModelParams)> = None;
        let mut history = Vec::new();
        while self.epoch < self.config.epochs {
            let lr = self.current_lr();
            let reports = self.train_epoch()?;
            let n = reports.len() as f64;
            let (hr, ndcg) = validate(&self.model)?;
            let rec = EpochRecord {
                epoch: self.epoch,
                main: reports.iter().map(|r| r.main).sum::<f64>() / n,
                cl: reports.iter().map(|r| r.cl).sum::<f64>() / n,
                theta: self.theta.theta,
                lr,
                val_hr10: hr,
                val_ndcg10: ndcg,
            };
            let improved = best.as_ref().is_none_or(|b| ndcg > b.2);
            if improved {
                best = Some((rec.epoch, hr, ndcg, self.model.params.clone()));
            }
            log::info!("{}", rec.log_line());
            observe(&rec, improved, &self.model)?;
            history.push(rec);
        }
        let (best_epoch, best_hr10, best_ndcg10, best_params) =
            best.ok_or_else(|| Error::config("no epochs left to train"))?;
        Ok(FitOutcome {
            best_epoch,
            best_hr10,
            best_ndcg10,
            best_params,
            history,
        })
    }

    /// [`Trainer::fit_with`] validating on `split.validation`.
    pub fn fit(&mut self, split: &EvalSplit) -> Result<FitOutcome> {
        let opts = EvalOptions::default();
        self.fit_with(
            |m| {
                let r = evaluate_split(m, &split.validation, &opts)?;
                Ok((r.hr(10).unwrap_or(0.0), r.ndcg(10).unwrap_or(0.0)))
            },
            |_, _, _| Ok(()),
        )
    }
}
