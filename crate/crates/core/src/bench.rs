//! Analytic multiply-add counts and forward-pass latency.
//!
//! Every matrix product, convolution, and weighted reduction contributes one
//! multiply-add per scalar product; elementwise work (bias, norm, ReLU,
//! softmax, upsampling) is not counted.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::Sample;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::head::SadlrConfig;
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderFlops {
    pub conv1: u64,
    pub conv2: u64,
    /// Masked word mean plus the sentence projection inside the fusion.
    pub lang: u64,
    pub fuse: u64,
}

impl EncoderFlops {
    pub fn total(&self) -> u64 {
        self.conv1 + self.conv2 + self.lang + self.fuse
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadFlops {
    pub iterations: usize,
    /// Masked word mean plus projection to `S`; zero when `n = 0`.
    pub sentence: u64,
    /// Kernel generation for one iteration, all layers.
    pub kernel_gen: u64,
    /// Dynamic channel mixing for one iteration, all layers.
    pub dynconv: u64,
    pub classifier: u64,
    /// Masked average pooling of `Y`, run `n − 1` times.
    pub pool: u64,
}

impl HeadFlops {
    pub fn per_iteration(&self) -> u64 {
        self.kernel_gen + self.dynconv + self.classifier
    }

    pub fn total(&self) -> u64 {
        let n = self.iterations as u64;
        if n == 0 {
            return self.classifier;
        }
        self.sentence + n * self.per_iteration() + (n - 1) * self.pool
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub encoder: EncoderFlops,
    pub head: HeadFlops,
    pub encoder_total: u64,
    pub head_total: u64,
    /// Head multiply-adds as a percentage of the encoder's.
    pub overhead_pct: f64,
}

/// Counts for a `height×width` image, `tokens` word slots, and the toy
/// encoder's two stride-2 stages.
pub fn flop_report(
    cfg: &SadlrConfig,
    height: usize,
    width: usize,
    tokens: usize,
) -> Result<FlopReport> {
    cfg.validate()?;
    if !height.is_multiple_of(4) || !width.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "image {height}x{width} is not divisible by 4"
        )));
    }
    let (c, cl) = (cfg.channels as u64, cfg.lang_channels as u64);
    let half = c / 2;
    let n_tok = tokens as u64;
    let p1 = (height / 2 * width / 2) as u64;
    let p = (height / 4 * width / 4) as u64;
    let encoder = EncoderFlops {
        conv1: half * 3 * 9 * p1,
        conv2: c * half * 9 * p,
        lang: cl * n_tok + c * cl,
        fuse: c * 2 * c * p,
    };
    let mut kernel_gen = 0;
    let mut dynconv = 0;
    let mut cin = c;
    for &cout in &cfg.structure {
        let cout = cout as u64;
        kernel_gen += cin * cout * c;
        dynconv += cin * cout * p;
        cin = cout;
    }
    let iterating = cfg.iterations > 0;
    let head = HeadFlops {
        iterations: cfg.iterations,
        sentence: if iterating { cl * n_tok + c * cl } else { 0 },
        kernel_gen: if iterating { kernel_gen } else { 0 },
        dynconv: if iterating { dynconv } else { 0 },
        classifier: 2 * cfg.classifier_in() as u64 * p,
        pool: if iterating { c * p } else { 0 },
    };
    let (encoder_total, head_total) = (encoder.total(), head.total());
    Ok(FlopReport {
        overhead_pct: 100.0 * head_total as f64 / encoder_total as f64,
        encoder,
        head,
        encoder_total,
        head_total,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub reps: usize,
    pub warmup: usize,
    /// Mean milliseconds of encoder-only forwards.
    pub encoder_ms: f64,
    /// Mean milliseconds of full forwards (encoder + head).
    pub total_ms: f64,
    pub head_ms: f64,
}

/// Mean wall-clock of `reps` single-sample forwards after `warmup` untimed ones.
pub fn measure_latency(
    model: &Model<f32>,
    sample: &Sample,
    reps: usize,
    warmup: usize,
) -> Result<LatencyReport> {
    if reps == 0 {
        return Err(Error::Config("reps must be positive".into()));
    }
    let encode_once = || -> Result<()> {
        let mut g = Graph::<f32>::new();
        model
            .encoder
            .encode(&mut g, &model.store, &sample.image, &sample.tokens)?;
        Ok(())
    };
    let full_once = || -> Result<()> {
        let mut g = Graph::<f32>::new();
        model.forward(&mut g, sample, None)?;
        Ok(())
    };
    let time = |f: &dyn Fn() -> Result<()>| -> Result<f64> {
        for _ in 0..warmup {
            f()?;
        }
        let t = Instant::now();
        for _ in 0..reps {
            f()?;
        }
        Ok(t.elapsed().as_secs_f64() * 1e3 / reps as f64)
    };
    let encoder_ms = time(&encode_once)?;
    let total_ms = time(&full_once)?;
    Ok(LatencyReport {
        reps,
        warmup,
        encoder_ms,
        total_ms,
        head_ms: (total_ms - encoder_ms).max(0.0),
    })
}
