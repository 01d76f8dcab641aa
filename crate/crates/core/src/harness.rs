//! The subcommands behind the `sadlr` binary, callable as library functions.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ablate::{run_ablation, AblationTable, Axis, RunCache};
use crate::autodiff::BackwardFault;
use crate::bench::{flop_report, measure_latency, FlopReport, LatencyReport};
use crate::checkpoint::{check_compatible, load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{generate_dataset, read_dataset, write_dataset, Sample, CANVAS, MAX_TOKENS};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, Evaluation};
use crate::gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
use crate::head::SadlrConfig;
use crate::metrics::{write_metrics_csv, MetricReport};
use crate::model::Model;
use crate::train::train_model;

pub const CHECKPOINT_FILE: &str = "model.sdlr";
pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MASK_DIR: &str = "masks";

/// Seeds and sizes of the generated sets used when no dataset path is given.
pub const DESK_TRAIN: (u64, usize) = (1_000_000, 2_500);
pub const DESK_VAL: (u64, usize) = (2_000_000, 500);

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_csv_file(path: &Path, eval: &Evaluation) -> Result<()> {
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, "iteration", &eval.labels, &eval.per_iteration)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Writes `count` samples drawn from seeds `seed..seed + count`.
pub fn cmd_gen_data(count: usize, seed: u64, out: &Path) -> Result<usize> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let samples = generate_dataset(seed, count);
    write_dataset(&samples, out)?;
    Ok(samples.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: String,
    #[serde(flatten)]
    pub report: MetricReport,
}

fn iteration_rows(eval: &Evaluation) -> Vec<IterationMetrics> {
    eval.labels
        .iter()
        .zip(&eval.per_iteration)
        .map(|(l, r)| IterationMetrics {
            iteration: l.clone(),
            report: r.clone(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub train_s: f64,
    pub eval_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: String,
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
    pub steps: usize,
    /// One row per iteration; empty without a validation set.
    pub metrics: Vec<IterationMetrics>,
    pub timings: Timings,
    pub flops: FlopReport,
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub report: RunReport,
    pub evaluation: Option<Evaluation>,
}

/// Trains on `cfg.train_data`, evaluates on `cfg.val_data` when set, and
/// writes the manifest, checkpoint, report and metrics into `cfg.out_dir`.
pub fn cmd_train(cfg: &RunConfig, mut on_epoch: impl FnMut(usize, f64)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_path = cfg
        .train_data
        .as_ref()
        .ok_or_else(|| Error::Config("train_data is not set".into()))?;
    let train_set = read_dataset(train_path)?;
    let val_set = cfg.val_data.as_ref().map(|p| read_dataset(p)).transpose()?;
    create_dir(&cfg.out_dir)?;
    let manifest = cfg.to_kv_text();
    let manifest_path = cfg.out_dir.join(RunConfig::MANIFEST);
    fs::write(&manifest_path, &manifest).map_err(|e| Error::io(&manifest_path, e))?;

    let t = Instant::now();
    let model = Model::init(&cfg.model, cfg.seed)?;
    let (model, log) = train_model(cfg, model, &train_set, &mut on_epoch)?;
    let train_s = t.elapsed().as_secs_f64();
    save_checkpoint(&model, &cfg.out_dir.join(CHECKPOINT_FILE))?;

    let t = Instant::now();
    let evaluation = match &val_set {
        Some(v) => {
            let e = evaluate_model(&model, v, None)?;
            write_csv_file(&cfg.out_dir.join(METRICS_FILE), &e)?;
            Some(e)
        }
        None => None,
    };
    let eval_s = t.elapsed().as_secs_f64();

    let report = RunReport {
        config: manifest,
        final_loss: *log.epoch_losses.last().expect("at least one epoch"),
        epoch_losses: log.epoch_losses,
        steps: log.steps,
        metrics: evaluation.as_ref().map(iteration_rows).unwrap_or_default(),
        timings: Timings { train_s, eval_s },
        flops: flop_report(&cfg.model, CANVAS, CANVAS, MAX_TOKENS)?,
    };
    write_json(&cfg.out_dir.join(REPORT_FILE), &report)?;
    Ok(TrainOutcome {
        model,
        report,
        evaluation,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub samples: usize,
    pub metrics: Vec<IterationMetrics>,
}

/// Scores a checkpoint on a dataset. With `expected`, the checkpoint's
/// config must match it exactly. With `out`, writes metrics and optionally
/// the per-iteration masks.
pub fn cmd_eval(
    ckpt: &Path,
    data: &Path,
    expected: Option<&SadlrConfig>,
    out: Option<&Path>,
    dump_masks: bool,
) -> Result<(Evaluation, EvalReport)> {
    let model = load_checkpoint(ckpt)?;
    if let Some(cfg) = expected {
        check_compatible(&model, cfg)?;
    }
    let samples = read_dataset(data)?;
    if samples.is_empty() {
        return Err(Error::Contract(format!(
            "{} holds no samples",
            data.display()
        )));
    }
    if dump_masks && out.is_none() {
        return Err(Error::Config(
            "dumping masks needs an output directory".into(),
        ));
    }
    let mask_dir = out.filter(|_| dump_masks).map(|o| o.join(MASK_DIR));
    let eval = evaluate_model(&model, &samples, mask_dir.as_deref())?;
    let report = EvalReport {
        checkpoint: ckpt.to_path_buf(),
        data: data.to_path_buf(),
        samples: samples.len(),
        metrics: iteration_rows(&eval),
    };
    if let Some(dir) = out {
        create_dir(dir)?;
        write_csv_file(&dir.join(METRICS_FILE), &eval)?;
        write_json(&dir.join(REPORT_FILE), &report)?;
    }
    Ok((eval, report))
}

fn dataset_or_generated(
    path: Option<&PathBuf>,
    (seed, count): (u64, usize),
) -> Result<Vec<Sample>> {
    match path {
        Some(p) => read_dataset(p),
        None => Ok(generate_dataset(seed, count)),
    }
}

/// Runs one ablation axis and writes `ablation_<axis>.csv` and `.json`
/// into `base.out_dir`. Without dataset paths the desk-default sets are
/// generated in memory.
pub fn cmd_ablate(
    base: &RunConfig,
    axis: Axis,
    values: &[String],
    seeds: &[u64],
    cache: &mut RunCache,
    progress: impl FnMut(&str, u64, &MetricReport),
) -> Result<AblationTable> {
    base.validate()?;
    let train_set = dataset_or_generated(base.train_data.as_ref(), DESK_TRAIN)?;
    let val_set = dataset_or_generated(base.val_data.as_ref(), DESK_VAL)?;
    let table = run_ablation(
        base, axis, values, seeds, &train_set, &val_set, cache, progress,
    )?;
    create_dir(&base.out_dir)?;
    let csv_path = base.out_dir.join(format!("ablation_{axis}.csv"));
    let mut buf = Vec::new();
    table.write_csv(&mut buf)?;
    fs::write(&csv_path, buf).map_err(|e| Error::io(&csv_path, e))?;
    write_json(&base.out_dir.join(format!("ablation_{axis}.json")), &table)?;
    let manifest = base.out_dir.join(RunConfig::MANIFEST);
    fs::write(&manifest, base.to_kv_text()).map_err(|e| Error::io(&manifest, e))?;
    Ok(table)
}

/// Audits every iteration count in `iterations` on a sample drawn from `seed`.
pub fn cmd_gradcheck(
    seed: u64,
    iterations: &[usize],
    fault: Option<BackwardFault>,
) -> Result<Vec<GradcheckReport>> {
    let opts = GradcheckOptions {
        fault,
        ..GradcheckOptions::default()
    };
    iterations
        .iter()
        .map(|&n| gradcheck(n, seed, &opts))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: String,
    pub flops: FlopReport,
    pub latency: LatencyReport,
}

/// FLOP counts for `model` plus mean forward latency on one generated sample.
pub fn cmd_bench(model: &Model<f32>, reps: usize, seed: u64) -> Result<BenchReport> {
    let sample = generate_dataset(seed, 1).remove(0);
    let warmup = reps.clamp(1, 20);
    Ok(BenchReport {
        config: model.cfg.to_kv_text(),
        flops: flop_report(
            &model.cfg,
            sample.height(),
            sample.width(),
            sample.tokens.len(),
        )?,
        latency: measure_latency(model, &sample, reps, warmup)?,
    })
}

/// Writes `value` as `report.json` inside `dir`.
pub fn write_report<T: Serialize>(dir: &Path, value: &T) -> Result<PathBuf> {
    create_dir(dir)?;
    let path = dir.join(REPORT_FILE);
    write_json(&path, value)?;
    Ok(path)
}
