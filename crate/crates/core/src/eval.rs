use std::fs;
use std::path::Path;

use crate::data::{mask_to_pgm, Sample};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::metrics::{MetricAccumulator, MetricReport};
use crate::model::Model;

/// Anything that turns a sample into one input-resolution mask per iteration.
pub trait Predictor {
    /// Number of masks `predict` returns; the last one is the prediction.
    fn rows(&self) -> usize;
    fn predict(&self, sample: &Sample) -> Result<Vec<BinaryMask>>;
}

impl Predictor for Model<f32> {
    fn rows(&self) -> usize {
        self.cfg.iterations.max(1)
    }

    fn predict(&self, sample: &Sample) -> Result<Vec<BinaryMask>> {
        Model::predict(self, sample)
    }
}

/// Test hook that answers every sample with its ground truth.
pub struct GroundTruthPredictor {
    pub rows: usize,
}

impl Predictor for GroundTruthPredictor {
    fn rows(&self) -> usize {
        self.rows
    }

    fn predict(&self, sample: &Sample) -> Result<Vec<BinaryMask>> {
        Ok(vec![sample.gt.clone(); self.rows])
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    /// One report per iteration, in order; the last row is the headline.
    pub per_iteration: Vec<MetricReport>,
    /// Row labels: `1..=n`, or `0` for a head without iterations.
    pub labels: Vec<String>,
}

impl Evaluation {
    pub fn headline(&self) -> &MetricReport {
        self.per_iteration.last().expect("at least one row")
    }
}

/// `00012_iter3.pgm` for sample 12, iteration label `3`.
pub fn mask_file_name(sample: usize, label: &str) -> String {
    format!("{sample:05}_iter{label}.pgm")
}

/// Scores every sample; with `dump_dir`, also writes each predicted and
/// ground-truth mask as PGM.
pub fn evaluate<P: Predictor>(
    predictor: &P,
    samples: &[Sample],
    row_labels: Vec<String>,
    dump_dir: Option<&Path>,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let rows = predictor.rows();
    if row_labels.len() != rows {
        return Err(Error::Contract(format!(
            "{} labels for {rows} rows",
            row_labels.len()
        )));
    }
    if let Some(dir) = dump_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut accs = vec![MetricAccumulator::new(); rows];
    for (idx, s) in samples.iter().enumerate() {
        let masks = predictor.predict(s)?;
        if masks.len() != rows {
            return Err(Error::Contract(format!(
                "predictor returned {} masks, expected {rows}",
                masks.len()
            )));
        }
        for ((m, acc), label) in masks.iter().zip(&mut accs).zip(&row_labels) {
            acc.push(m, &s.gt)?;
            if let Some(dir) = dump_dir {
                mask_to_pgm(m, &dir.join(mask_file_name(idx, label)))?;
            }
        }
        if let Some(dir) = dump_dir {
            mask_to_pgm(&s.gt, &dir.join(format!("{idx:05}_gt.pgm")))?;
        }
    }
    Ok(Evaluation {
        per_iteration: accs.iter().map(|a| a.report()).collect::<Result<_>>()?,
        labels: row_labels,
    })
}

pub fn iteration_labels(iterations: usize) -> Vec<String> {
    if iterations == 0 {
        vec!["0".into()]
    } else {
        (1..=iterations).map(|i| i.to_string()).collect()
    }
}

pub fn evaluate_model(
    model: &Model<f32>,
    samples: &[Sample],
    dump_dir: Option<&Path>,
) -> Result<Evaluation> {
    evaluate(
        model,
        samples,
        iteration_labels(model.cfg.iterations),
        dump_dir,
    )
}
