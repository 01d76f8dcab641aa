//! AdamW with a poly learning-rate schedule over shuffled mini-batches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::config::RunConfig;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::param::ParamStore;

/// `base · (1 − step/total)^power`
pub fn poly_lr(base: f64, step: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (1.0 - step as f64 / total as f64).max(0.0);
    base * frac.powf(power)
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u32,
}

impl AdamW {
    pub fn new(store: &ParamStore<f32>, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|p| vec![0f32; p.value.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step = (lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let decay = (1.0 - lr * self.weight_decay) as f32;
        let eps = self.eps as f32;
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let grad = p.grad.data().to_vec();
            for (((w, g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w *= decay;
                *w -= step * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean per-sample total loss of each epoch, measured during training.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

pub fn total_steps(samples: usize, batch: usize, epochs: usize) -> usize {
    samples.div_ceil(batch) * epochs
}

/// Trains a freshly initialized model on `train`.
pub fn train(cfg: &RunConfig, train: &[Sample]) -> Result<(Model<f32>, TrainLog)> {
    cfg.validate()?;
    let model = Model::init(&cfg.model, cfg.seed)?;
    train_model(cfg, model, train, |_, _| {})
}

/// Trains `model` in place; `on_epoch(epoch, mean_loss)` runs after every epoch.
pub fn train_model(
    cfg: &RunConfig,
    mut model: Model<f32>,
    train: &[Sample],
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(Model<f32>, TrainLog)> {
    if train.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let mut opt = AdamW::new(&model.store, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5a4d_1e00_0000);
    let total = total_steps(train.len(), cfg.batch_size, cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            model.store.zero_grad();
            for &i in batch {
                let mut g = Graph::new();
                let (loss, report, _) = model.loss(&mut g, &train[i], None)?;
                if !report.total.is_finite() {
                    return Err(Error::NonFinite {
                        step,
                        epoch,
                        batch: batch_idx,
                    });
                }
                epoch_loss += report.total;
                g.backward(loss)?.accumulate_into(&mut model.store)?;
            }
            model.store.scale_grads(1.0 / batch.len() as f32);
            if model.store.iter().any(|p| !p.grad.all_finite()) {
                return Err(Error::NonFinite {
                    step,
                    epoch,
                    batch: batch_idx,
                });
            }
            opt.step(
                &mut model.store,
                poly_lr(cfg.lr, step, total, cfg.poly_power),
            );
            step += 1;
        }
        let mean = epoch_loss / train.len() as f64;
        log.epoch_losses.push(mean);
        on_epoch(epoch, mean);
    }
    log.steps = step;
    Ok((model, log))
}

/// Mean total loss over `samples` without updating anything.
pub fn mean_loss(model: &Model<f32>, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Contract("no samples to score".into()));
    }
    let mut sum = 0.0;
    for s in samples {
        let mut g = Graph::new();
        let (_, report, _) = model.loss(&mut g, s, None)?;
        sum += report.total;
    }
    Ok(sum / samples.len() as f64)
}
