//! Seed-averaged ablation grids over one configuration axis.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{parse_list, RunConfig};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::eval::evaluate_model;
use crate::head::{lambda_preset, UpdateMode};
use crate::metrics::{MetricReport, CSV_COLUMNS};
use crate::train::train;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Iterations,
    Structure,
    Update,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Iterations => "iterations",
            Axis::Structure => "structure",
            Axis::Update => "update",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iterations" => Ok(Axis::Iterations),
            "structure" => Ok(Axis::Structure),
            "update" => Ok(Axis::Update),
            _ => Err(Error::Config(format!(
                "unknown ablation axis {s:?}; expected iterations, structure or update"
            ))),
        }
    }
}

pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];

/// Splits a value list. Structures are bracketed (`[8],[32],[8,32]`);
/// other axes are plain comma lists.
pub fn parse_values(axis: Axis, text: &str) -> Result<Vec<String>> {
    let text = text.trim();
    let values: Vec<String> = match axis {
        Axis::Structure if text.contains('[') => {
            let mut out = Vec::new();
            let mut rest = text;
            while let Some(open) = rest.find('[') {
                let close = rest[open..]
                    .find(']')
                    .ok_or_else(|| Error::Config(format!("unclosed '[' in {text:?}")))?;
                out.push(format!("[{}]", rest[open + 1..open + close].trim()));
                rest = &rest[open + close + 1..];
            }
            out
        }
        Axis::Structure => text.split(';').map(|s| format!("[{}]", s.trim())).collect(),
        _ => text.split(',').map(|s| s.trim().to_string()).collect(),
    };
    if values.is_empty() || values.iter().any(|v| v.is_empty() || v == "[]") {
        return Err(Error::Config(format!("empty ablation value in {text:?}")));
    }
    for v in &values {
        apply(axis, v, &RunConfig::default())?;
    }
    Ok(values)
}

/// `base` with one axis set to `value`.
pub fn apply(axis: Axis, value: &str, base: &RunConfig) -> Result<RunConfig> {
    let mut cfg = base.clone();
    match axis {
        Axis::Iterations => {
            let n: usize = value
                .parse()
                .map_err(|_| Error::Config(format!("bad iteration count {value:?}")))?;
            cfg = cfg.with_iterations(n);
        }
        Axis::Structure => cfg.model.structure = parse_list(value)?,
        Axis::Update => {
            cfg.model.update_mode = value.parse::<UpdateMode>()?;
            if cfg.model.lambdas.len() != cfg.model.iterations {
                cfg.model.lambdas = lambda_preset(cfg.model.iterations);
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Headline metrics of finished runs, keyed by their full serialized config.
#[derive(Default)]
pub struct RunCache {
    runs: HashMap<String, MetricReport>,
}

impl RunCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    /// Trains and evaluates `cfg` unless an identical run is cached.
    pub fn run(
        &mut self,
        cfg: &RunConfig,
        train_set: &[Sample],
        val: &[Sample],
    ) -> Result<MetricReport> {
        let key = cfg.to_kv_text();
        if let Some(r) = self.runs.get(&key) {
            return Ok(r.clone());
        }
        let (model, _) = train(cfg, train_set)?;
        let report = evaluate_model(&model, val, None)?.headline().clone();
        self.runs.insert(key, report.clone());
        Ok(report)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<MetricReport>,
    /// Mean per metric, in `CSV_COLUMNS` order.
    pub mean: [f64; 7],
    /// Sample standard deviation per metric; zero for a single seed.
    pub stdev: [f64; 7],
}

impl AblationRow {
    pub fn from_runs(value: String, seeds: Vec<u64>, runs: Vec<MetricReport>) -> Result<Self> {
        if runs.is_empty() || runs.len() != seeds.len() {
            return Err(Error::Contract(format!(
                "ablation value {value:?} has {} runs for {} seeds",
                runs.len(),
                seeds.len()
            )));
        }
        let k = runs.len() as f64;
        let mut mean = [0.0; 7];
        let mut stdev = [0.0; 7];
        for j in 0..7 {
            let xs: Vec<f64> = runs.iter().map(|r| r.row()[j]).collect();
            mean[j] = xs.iter().sum::<f64>() / k;
            if runs.len() > 1 {
                let ss: f64 = xs.iter().map(|x| (x - mean[j]).powi(2)).sum();
                stdev[j] = (ss / (k - 1.0)).sqrt();
            }
        }
        Ok(Self {
            value,
            seeds,
            runs,
            mean,
            stdev,
        })
    }

    pub fn mean_iou(&self) -> f64 {
        self.mean[6]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: Axis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, value: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.value == value)
    }

    /// One line per value: the axis value, the seed count, then
    /// `metric,metric_sd` pairs.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![self.axis.to_string(), "seeds".to_string()];
        for c in CSV_COLUMNS {
            header.push(c.to_string());
            header.push(format!("{c}_sd"));
        }
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.value.clone(), r.seeds.len().to_string()];
            for j in 0..7 {
                rec.push(format!("{:.6}", r.mean[j]));
                rec.push(format!("{:.6}", r.stdev[j]));
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Trains and evaluates every value under every seed. Any failed run fails
/// the whole table.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    base: &RunConfig,
    axis: Axis,
    values: &[String],
    seeds: &[u64],
    train_set: &[Sample],
    val: &[Sample],
    cache: &mut RunCache,
    mut progress: impl FnMut(&str, u64, &MetricReport),
) -> Result<AblationTable> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "ablation needs at least one value and one seed".into(),
        ));
    }
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = apply(axis, value, base)?;
            cfg.seed = seed;
            let report = cache.run(&cfg, train_set, val)?;
            progress(value, seed, &report);
            runs.push(report);
        }
        rows.push(AblationRow::from_runs(value.clone(), seeds.to_vec(), runs)?);
    }
    Ok(AblationTable { axis, rows })
}
