//! `cbit`: preprocess interaction logs, train, evaluate and inspect models.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use cbit_core::data::InputFormat;
use clap::{Args, Parser, Subcommand};

use crate::commands::Split;
use crate::config::RunConfig;
use crate::error::{CliError, Result};

#[derive(Parser)]
#[command(name = "cbit", version, about = "Bidirectional-transformer sequential recommender")]
struct Cli {
    /// Print a JSON summary on stdout after the command finishes.
    #[arg(long, global = true)]
    json: bool,
    /// Log progress to stderr (`RUST_LOG` overrides).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter and index a raw interaction file.
    Preprocess {
        /// `user item timestamp` lines, or `user item item ...` with --format sequence.
        input: PathBuf,
        /// Output directory for the dataset and vocabulary.
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value = "triplet")]
        format: InputFormat,
        /// Window size to record with the dataset.
        #[arg(long)]
        slide_window: Option<usize>,
    },
    /// Train a model and write runs/<name>/{config.echo, train.log, best.ckpt, metrics.tsv}.
    #[command(args_override_self = true)]
    Train(Box<TrainArgs>),
    /// Rank every item for each held-out target and report HR@K / NDCG@K.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long, value_delimiter = ',', default_value = "5,10,20")]
        ks: Vec<usize>,
        /// Drop the user's other history items from the candidates.
        #[arg(long)]
        filter_seen: bool,
        /// Also write the metrics table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write attention maps averaged over sampled test contexts.
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        samples: usize,
        #[arg(short, long)]
        out: PathBuf,
        /// Add a head-averaged map after each layer.
        #[arg(long)]
        head_mean: bool,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// `key=value` file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set pooling=mean`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "5,10,20")]
    ks: Vec<usize>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    mask_prob: Option<f64>,
    #[arg(long)]
    num_views: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    slide_window: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    filter_seen: bool,
    /// Train with the cloze loss only.
    #[arg(long)]
    no_contrastive: bool,
}

impl TrainArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let flags: [(&str, Option<String>); 19] = [
            ("data", self.data.as_ref().map(|p| p.display().to_string())),
            ("run_dir", self.run_dir.as_ref().map(|p| p.display().to_string())),
            ("name", self.name.clone()),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("learning_rate", self.learning_rate.map(|v| v.to_string())),
            ("dim", self.dim.map(|v| v.to_string())),
            ("layers", self.layers.map(|v| v.to_string())),
            ("heads", self.heads.map(|v| v.to_string())),
            ("mask_prob", self.mask_prob.map(|v| v.to_string())),
            ("num_views", self.num_views.map(|v| v.to_string())),
            ("tau", self.tau.map(|v| v.to_string())),
            ("alpha", self.alpha.map(|v| v.to_string())),
            ("lambda", self.lambda.map(|v| v.to_string())),
            ("dropout", self.dropout.map(|v| v.to_string())),
            ("slide_window", self.slide_window.map(|v| v.to_string())),
            ("stride", self.stride.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("filter_seen", self.filter_seen.then(|| "true".to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        if self.no_contrastive {
            cfg.set("contrastive", "false")?;
        }
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }
}

fn check_ks(ks: &[usize]) -> Result<()> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(CliError::usage("cut-offs must be positive"));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::Preprocess {
            input,
            out,
            format,
            slide_window,
        } => commands::preprocess(&input, &out, format, slide_window),
        Command::Train(args) => {
            check_ks(&args.ks)?;
            let cfg = args.resolve()?;
            commands::train(cfg, &args.ks)
        }
        Command::Evaluate {
            checkpoint,
            data,
            split,
            ks,
            filter_seen,
            out,
        } => {
            check_ks(&ks)?;
            commands::evaluate(&checkpoint, &data, split, &ks, filter_seen, out.as_ref())
        }
        Command::DumpAttention {
            checkpoint,
            data,
            samples,
            out,
            head_mean,
        } => commands::dump_attention(&checkpoint, &data, samples, &out, head_mean),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let json = cli.json;
    match run(cli) {
        Ok(summary) => {
            if json {
                println!("{summary}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
