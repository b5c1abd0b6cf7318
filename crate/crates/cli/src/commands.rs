use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cbit_core::checkpoint;
use cbit_core::data::{leave_one_out, load_interactions, read_dataset, write_dataset, EvalCase, InputFormat};
use cbit_core::encoder::Model;
use cbit_core::eval::{evaluate_split, export_attention, EvalOptions, MetricsReport};
use cbit_core::training::{init_seed, EpochRecord, Trainer};
use serde_json::{json, Value};

use crate::config::{RunConfig, DEFAULT_MAX_LEN};
use crate::error::{CliError, Result};

pub const CONFIG_ECHO: &str = "config.echo";
pub const TRAIN_LOG: &str = "train.log";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS: &str = "metrics.tsv";
pub const STATS_FILE: &str = "stats.txt";
const METRICS_HEADER: &str = "split\tk\thr\tndcg";

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path.display().to_string(), e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path.display().to_string(), e))
}

fn metrics_json(report: &MetricsReport) -> Value {
    let mut m = serde_json::Map::new();
    for (k, (hr, ndcg)) in &report.metrics {
        m.insert(k.to_string(), json!({ "hr": hr, "ndcg": ndcg }));
    }
    json!({ "users": report.users, "at": m })
}

pub fn preprocess(input: &Path, out: &Path, format: InputFormat, slide_window: Option<usize>) -> Result<Value> {
    if slide_window.is_some_and(|t| t < 2) {
        return Err(CliError::usage("slide window must be at least 2"));
    }
    let ds = load_interactions(input, format)?;
    write_dataset(&ds, out, slide_window)?;
    let stats = ds.stats();
    write_file(&out.join(STATS_FILE), &format!("{stats}\n"))?;
    println!("{stats}");
    Ok(json!({
        "out": out.display().to_string(),
        "users": stats.users,
        "items": stats.items,
        "actions": stats.actions,
        "avg_length": stats.avg_length,
        "sparsity": stats.sparsity,
    }))
}

fn eval_options(ks: &[usize], filter_seen: bool) -> EvalOptions {
    EvalOptions {
        ks: ks.to_vec(),
        filter_seen,
        ..EvalOptions::default()
    }
}

pub fn train(mut cfg: RunConfig, ks: &[usize]) -> Result<Value> {
    cfg.validate()?;
    let data = cfg
        .data
        .clone()
        .ok_or_else(|| CliError::usage("no dataset given (set data=... or pass --data)"))?;
    let (ds, recorded) = read_dataset(&data)?;
    let max_len = cfg.slide_window.or(recorded).unwrap_or(DEFAULT_MAX_LEN);
    cfg.slide_window = Some(max_len);
    cfg.model.max_len = max_len;
    cfg.model.num_items = ds.num_items();
    cfg.model.validate()?;
    let split = leave_one_out(&ds)?;

    let dir = cfg.run_dir.join(&cfg.name);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(dir.display().to_string(), e))?;
    write_file(&dir.join(CONFIG_ECHO), &cfg.echo())?;

    let model = Model::init(cfg.model.clone(), init_seed(cfg.train.seed))?;
    let mut trainer = Trainer::from_split(model, cfg.train.clone(), &split)?;
    log::info!(
        "{} users, {} items, {} training windows, run directory {}",
        ds.sequences.len(),
        ds.num_items(),
        trainer.windows().len(),
        dir.display()
    );

    let log_path = dir.join(TRAIN_LOG);
    let mut train_log = create(&log_path)?;
    writeln!(train_log, "{}", EpochRecord::HEADER).map_err(|e| CliError::io(log_path.display().to_string(), e))?;
    let val_opts = eval_options(&[10], cfg.filter_seen);
    let outcome = trainer.fit_with(
        |m| {
            let r = evaluate_split(m, &split.validation, &val_opts)?;
            Ok((r.hr(10).unwrap_or(0.0), r.ndcg(10).unwrap_or(0.0)))
        },
        |rec, _, _| {
            writeln!(train_log, "{}", rec.log_line())?;
            train_log.flush()?;
            Ok(())
        },
    )?;

    let best = Model::from_params(cfg.model.clone(), outcome.best_params)?;
    let meta = BTreeMap::from([
        ("best_epoch".to_string(), outcome.best_epoch.to_string()),
        ("seed".to_string(), cfg.train.seed.to_string()),
        ("val_hr10".to_string(), outcome.best_hr10.to_string()),
        ("val_ndcg10".to_string(), outcome.best_ndcg10.to_string()),
    ]);
    checkpoint::save(&dir.join(BEST_CHECKPOINT), &best, &meta)?;

    let opts = eval_options(ks, cfg.filter_seen);
    let val = evaluate_split(&best, &split.validation, &opts)?;
    let test = evaluate_split(&best, &split.test, &opts)?;
    let mut tsv = format!("{METRICS_HEADER}\n");
    for line in val.tsv_lines("validation").into_iter().chain(test.tsv_lines("test")) {
        println!("{line}");
        tsv.push_str(&line);
        tsv.push('\n');
    }
    write_file(&dir.join(METRICS), &tsv)?;
    Ok(json!({
        "run_dir": dir.display().to_string(),
        "best_epoch": outcome.best_epoch,
        "val_hr10": outcome.best_hr10,
        "val_ndcg10": outcome.best_ndcg10,
        "validation": metrics_json(&val),
        "test": metrics_json(&test),
    }))
}

fn load_model_for(checkpoint_path: &Path, data: &Path) -> Result<(Model, Vec<EvalCase>, Vec<EvalCase>)> {
    let ckpt = checkpoint::load(checkpoint_path)?;
    let (ds, _) = read_dataset(data)?;
    if ckpt.model.config.num_items != ds.num_items() {
        return Err(cbit_core::Error::Data(format!(
            "checkpoint {} was trained on {} items but dataset {} has {}",
            checkpoint_path.display(),
            ckpt.model.config.num_items,
            data.display(),
            ds.num_items()
        ))
        .into());
    }
    let split = leave_one_out(&ds)?;
    Ok((ckpt.model, split.validation, split.test))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Validation,
    Test,
    Both,
}

pub fn evaluate(
    checkpoint_path: &Path,
    data: &Path,
    split: Split,
    ks: &[usize],
    filter_seen: bool,
    out: Option<&PathBuf>,
) -> Result<Value> {
    let (model, validation, test) = load_model_for(checkpoint_path, data)?;
    let opts = eval_options(ks, filter_seen);
    let mut parts = Vec::new();
    if matches!(split, Split::Validation | Split::Both) {
        parts.push(("validation", evaluate_split(&model, &validation, &opts)?));
    }
    if matches!(split, Split::Test | Split::Both) {
        parts.push(("test", evaluate_split(&model, &test, &opts)?));
    }
    let mut tsv = format!("{METRICS_HEADER}\n");
    let mut summary = serde_json::Map::new();
    for (name, report) in &parts {
        for line in report.tsv_lines(name) {
            println!("{line}");
            tsv.push_str(&line);
            tsv.push('\n');
        }
        summary.insert(name.to_string(), metrics_json(report));
    }
    if let Some(path) = out {
        write_file(path, &tsv)?;
    }
    Ok(Value::Object(summary))
}

/// `n` contexts spread evenly over the test users.
fn sample_contexts(cases: &[EvalCase], n: usize) -> Vec<&[usize]> {
    let n = n.min(cases.len());
    (0..n).map(|i| cases[i * cases.len() / n].context.as_slice()).collect()
}

pub fn dump_attention(
    checkpoint_path: &Path,
    data: &Path,
    samples: usize,
    out: &Path,
    head_mean: bool,
) -> Result<Value> {
    if samples == 0 {
        return Err(CliError::usage("--samples must be positive"));
    }
    let (model, _, test) = load_model_for(checkpoint_path, data)?;
    let contexts = sample_contexts(&test, samples);
    let maps = export_attention(&model, &contexts, out, head_mean)?;
    Ok(json!({
        "out": out.display().to_string(),
        "samples": contexts.len(),
        "layers": maps.len(),
        "heads": maps.first().map_or(0, Vec::len),
        "max_len": model.config.max_len,
    }))
}
