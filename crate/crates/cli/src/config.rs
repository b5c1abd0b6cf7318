//! `key=value` run configuration. A file is read first, then command-line
//! flags override individual keys; the resolved set is echoed into the run
//! directory and can be fed back with `--config`.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cbit_core::encoder::ModelConfig;
use cbit_core::objectives::{ObjectiveConfig, Pooling, Reduction};
use cbit_core::training::TrainConfig;

use crate::error::{CliError, Result};

pub const DEFAULT_MAX_LEN: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub run_dir: PathBuf,
    pub name: String,
    /// `None` defers to the window size recorded by `preprocess`.
    pub slide_window: Option<usize>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub filter_seen: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            run_dir: PathBuf::from("runs"),
            name: "default".into(),
            slide_window: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            filter_seen: false,
        }
    }
}

pub const KEYS: &[&str] = &[
    "data",
    "run_dir",
    "name",
    "slide_window",
    "stride",
    "dim",
    "layers",
    "heads",
    "dropout",
    "init_std",
    "key_padding_mask",
    "epochs",
    "batch_size",
    "learning_rate",
    "beta1",
    "beta2",
    "adam_eps",
    "decay_gamma",
    "decay_every",
    "clip_norm",
    "mask_prob",
    "num_views",
    "tau",
    "pooling",
    "reduction",
    "contrastive",
    "alpha",
    "lambda",
    "seed",
    "filter_seen",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CliError::usage(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::usage(format!("bad value {value:?} for {key} (expected true or false)"))),
    }
}

fn opt<T: Display>(v: Option<T>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let (m, t) = (&mut self.model, &mut self.train);
        let o: &mut ObjectiveConfig = &mut t.objective;
        match key {
            "data" => self.data = if value == "none" { None } else { Some(PathBuf::from(value)) },
            "run_dir" => self.run_dir = PathBuf::from(value),
            "name" => {
                if value.is_empty() || value.contains(['/', '\\']) {
                    return Err(CliError::usage(format!("run name {value:?} must be a plain directory name")));
                }
                self.name = value.to_string()
            }
            "slide_window" => self.slide_window = if value == "none" { None } else { Some(parse(key, value)?) },
            "stride" => t.stride = parse(key, value)?,
            "dim" => m.dim = parse(key, value)?,
            "layers" => m.layers = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "dropout" => m.dropout = parse(key, value)?,
            "init_std" => m.init_std = parse(key, value)?,
            "key_padding_mask" => m.key_padding_mask = parse_bool(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "decay_gamma" => t.decay_gamma = parse(key, value)?,
            "decay_every" => t.decay_every = parse(key, value)?,
            "clip_norm" => t.clip_norm = if value == "none" { None } else { Some(parse(key, value)?) },
            "mask_prob" => o.mask_prob = parse(key, value)?,
            "num_views" => o.num_views = parse(key, value)?,
            "tau" => o.tau = parse(key, value)?,
            "pooling" => {
                o.pooling = match value {
                    "flatten" => Pooling::Flatten,
                    "mean" => Pooling::Mean,
                    _ => return Err(CliError::usage(format!("bad pooling {value:?} (expected flatten or mean)"))),
                }
            }
            "reduction" => {
                o.reduction = match value {
                    "mean" => Reduction::Mean,
                    "sum" => Reduction::Sum,
                    _ => return Err(CliError::usage(format!("bad reduction {value:?} (expected mean or sum)"))),
                }
            }
            "contrastive" => o.contrastive = parse_bool(key, value)?,
            "alpha" => t.alpha = parse(key, value)?,
            "lambda" => t.lambda = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "filter_seen" => self.filter_seen = parse_bool(key, value)?,
            _ => return Err(CliError::usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("{origin}:{}: expected key=value, found {line:?}", i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| CliError::usage(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path.display().to_string(), e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (m, t) = (&self.model, &self.train);
        let o = &t.objective;
        Some(match key {
            "data" => opt(self.data.as_ref().map(|p| p.display())),
            "run_dir" => self.run_dir.display().to_string(),
            "name" => self.name.clone(),
            "slide_window" => opt(self.slide_window),
            "stride" => t.stride.to_string(),
            "dim" => m.dim.to_string(),
            "layers" => m.layers.to_string(),
            "heads" => m.heads.to_string(),
            "dropout" => m.dropout.to_string(),
            "init_std" => m.init_std.to_string(),
            "key_padding_mask" => m.key_padding_mask.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "learning_rate" => t.learning_rate.to_string(),
            "beta1" => t.beta1.to_string(),
            "beta2" => t.beta2.to_string(),
            "adam_eps" => t.adam_eps.to_string(),
            "decay_gamma" => t.decay_gamma.to_string(),
            "decay_every" => t.decay_every.to_string(),
            "clip_norm" => opt(t.clip_norm),
            "mask_prob" => o.mask_prob.to_string(),
            "num_views" => o.num_views.to_string(),
            "tau" => o.tau.to_string(),
            "pooling" => match o.pooling {
                Pooling::Flatten => "flatten".into(),
                Pooling::Mean => "mean".into(),
            },
            "reduction" => match o.reduction {
                Reduction::Mean => "mean".into(),
                Reduction::Sum => "sum".into(),
            },
            "contrastive" => o.contrastive.to_string(),
            "alpha" => t.alpha.to_string(),
            "lambda" => t.lambda.to_string(),
            "seed" => t.seed.to_string(),
            "filter_seen" => self.filter_seen.to_string(),
            _ => return None,
        })
    }

    /// Every key, one `key=value` per line, in schema order.
    pub fn echo(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("every schema key has a value")))
            .collect()
    }

    /// Checks everything that does not depend on the dataset.
    pub fn validate(&self) -> Result<()> {
        let mut model = self.model.clone();
        model.max_len = self.slide_window.unwrap_or(DEFAULT_MAX_LEN);
        model.num_items = model.num_items.max(1);
        model.validate()?;
        self.train.validate()?;
        Ok(())
    }
}
