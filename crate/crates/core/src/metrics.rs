//! Referring-segmentation metrics: P@K, mean IoU, overall IoU.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

pub const THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];
pub const CSV_COLUMNS: [&str; 7] = ["p50", "p60", "p70", "p80", "p90", "oiou", "miou"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouSample {
    pub intersection: u64,
    pub union: u64,
    pub iou: f64,
}

pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<IouSample> {
    if !pred.same_shape(gt) {
        return Err(Error::dim(
            "iou",
            &[pred.height(), pred.width()],
            &[gt.height(), gt.width()],
        ));
    }
    let (mut i, mut u) = (0u64, 0u64);
    for (&a, &b) in pred.bits().iter().zip(gt.bits()) {
        i += (a & b) as u64;
        u += (a | b) as u64;
    }
    let iou = if u == 0 { 1.0 } else { i as f64 / u as f64 };
    Ok(IouSample {
        intersection: i,
        union: u,
        iou,
    })
}

/// Percentage of IoUs strictly above `k`.
pub fn precision_at_k(ious: &[f64], k: f64) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::Contract(
            "precision@K of an empty sample list".into(),
        ));
    }
    if !(k > 0.0 && k < 1.0) {
        return Err(Error::Contract(format!("threshold {k} outside (0, 1)")));
    }
    let hits = ious.iter().filter(|&&v| v > k).count();
    Ok(100.0 * hits as f64 / ious.len() as f64)
}

pub fn mean_iou(samples: &[IouSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Contract("mean IoU of an empty sample list".into()));
    }
    Ok(samples.iter().map(|s| s.iou).sum::<f64>() / samples.len() as f64)
}

/// Accumulated intersection over accumulated union; 1 when every union is empty.
pub fn overall_iou(samples: &[IouSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Contract(
            "overall IoU of an empty sample list".into(),
        ));
    }
    let i: u64 = samples.iter().map(|s| s.intersection).sum();
    let u: u64 = samples.iter().map(|s| s.union).sum();
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Threshold (formatted `"0.5"` .. `"0.9"`) to percentage.
    pub p_at_k: BTreeMap<String, f64>,
    pub mean_iou: f64,
    pub overall_iou: f64,
    pub intersection: u64,
    pub union: u64,
    pub count: usize,
}

impl MetricReport {
    pub fn p(&self, k: f64) -> f64 {
        self.p_at_k[&threshold_key(k)]
    }

    /// Values in `CSV_COLUMNS` order.
    pub fn row(&self) -> [f64; 7] {
        [
            self.p(0.5),
            self.p(0.6),
            self.p(0.7),
            self.p(0.8),
            self.p(0.9),
            self.overall_iou,
            self.mean_iou,
        ]
    }
}

fn threshold_key(k: f64) -> String {
    format!("{k:.1}")
}

/// Mergeable per-sample accumulator.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricAccumulator {
    samples: Vec<IouSample>,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, pred: &BinaryMask, gt: &BinaryMask) -> Result<IouSample> {
        let s = iou(pred, gt)?;
        self.samples.push(s);
        Ok(s)
    }

    pub fn push_sample(&mut self, s: IouSample) {
        self.samples.push(s);
    }

    pub fn merge(&mut self, other: MetricAccumulator) {
        self.samples.extend(other.samples);
    }

    pub fn samples(&self) -> &[IouSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn report(&self) -> Result<MetricReport> {
        let ious: Vec<f64> = self.samples.iter().map(|s| s.iou).collect();
        let mut p_at_k = BTreeMap::new();
        for k in THRESHOLDS {
            p_at_k.insert(threshold_key(k), precision_at_k(&ious, k)?);
        }
        Ok(MetricReport {
            p_at_k,
            mean_iou: mean_iou(&self.samples)?,
            overall_iou: overall_iou(&self.samples)?,
            intersection: self.samples.iter().map(|s| s.intersection).sum(),
            union: self.samples.iter().map(|s| s.union).sum(),
            count: self.samples.len(),
        })
    }
}

/// Writes one CSV row per report, keyed by `labels`.
pub fn write_metrics_csv<W: Write>(
    out: W,
    key: &str,
    labels: &[String],
    reports: &[MetricReport],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![key.to_string()];
    header.extend(CSV_COLUMNS.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for (label, r) in labels.iter().zip(reports) {
        let mut rec = vec![label.clone()];
        rec.extend(r.row().iter().map(|v| format!("{v:.6}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
