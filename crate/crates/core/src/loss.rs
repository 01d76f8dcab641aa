//! Multi-iteration Dice training loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::Real;

pub const DICE_EPS: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub per_iteration: Vec<f64>,
    pub total: f64,
}

/// `1 − (2·Σ prob·gt + eps) / (Σ prob + Σ gt + eps)` for one class.
pub fn dice_loss_per_class<T: Real>(
    g: &mut Graph<T>,
    prob: Var,
    gt: &BinaryMask,
    eps: f64,
) -> Result<Var> {
    if g.shape(prob) != [gt.height(), gt.width()] {
        return Err(Error::dim(
            "dice_loss",
            g.shape(prob),
            &[gt.height(), gt.width()],
        ));
    }
    g.dice_loss(prob, &gt.to_reals::<T>(), T::of(eps))
}

/// Plain-value Dice loss, for reporting.
pub fn dice_loss_value(prob: &[f64], gt: &BinaryMask, eps: f64) -> f64 {
    let (mut inter, mut psum, mut gsum) = (0.0, 0.0, 0.0);
    for (&p, &b) in prob.iter().zip(gt.bits()) {
        let b = b as f64;
        inter += p * b;
        psum += p;
        gsum += b;
    }
    1.0 - (2.0 * inter + eps) / (psum + gsum + eps)
}

/// Mean of the object-class and background-class Dice losses on softmaxed
/// scores that are already at ground-truth resolution.
pub fn iteration_loss<T: Real>(g: &mut Graph<T>, scores_up: Var, gt: &BinaryMask) -> Result<Var> {
    let (_, h, w) = g.value(scores_up).dims3("iteration_loss")?;
    if (h, w) != (gt.height(), gt.width()) {
        return Err(Error::Contract(format!(
            "score resolution {h}x{w} differs from ground truth {}x{}",
            gt.height(),
            gt.width()
        )));
    }
    let prob = g.softmax_channel(scores_up)?;
    let p_bg = g.select_channel(prob, 0)?;
    let p_obj = g.select_channel(prob, 1)?;
    let l_obj = dice_loss_per_class(g, p_obj, gt, DICE_EPS)?;
    let l_bg = dice_loss_per_class(g, p_bg, &gt.complement(), DICE_EPS)?;
    g.weighted_sum(&[l_obj, l_bg], &[T::of(0.5), T::of(0.5)])
}

pub fn total_loss<T: Real>(g: &mut Graph<T>, losses: &[Var], lambdas: &[f64]) -> Result<Var> {
    if losses.len() != lambdas.len() {
        return Err(Error::Contract(format!(
            "{} iteration losses vs {} weights",
            losses.len(),
            lambdas.len()
        )));
    }
    let w: Vec<T> = lambdas.iter().map(|&l| T::of(l)).collect();
    g.weighted_sum(losses, &w)
}

pub fn weighted_total(losses: &[f64], lambdas: &[f64]) -> Result<f64> {
    if losses.len() != lambdas.len() {
        return Err(Error::Contract(format!(
            "{} iteration losses vs {} weights",
            losses.len(),
            lambdas.len()
        )));
    }
    Ok(losses.iter().zip(lambdas).map(|(l, w)| l * w).sum())
}

/// Upsamples every score map by `factor`, scores it against `gt`, and
/// combines the iterations with `lambdas`.
pub fn head_loss<T: Real>(
    g: &mut Graph<T>,
    scores: &[Var],
    gt: &BinaryMask,
    factor: usize,
    lambdas: &[f64],
) -> Result<(Var, LossReport)> {
    let mut terms = Vec::with_capacity(scores.len());
    for &r in scores {
        let up = g.bilinear_upsample(r, factor)?;
        terms.push(iteration_loss(g, up, gt)?);
    }
    let total = total_loss(g, &terms, lambdas)?;
    let report = LossReport {
        per_iteration: terms.iter().map(|&t| g.value(t).item().f64()).collect(),
        total: g.value(total).item().f64(),
    };
    Ok((total, report))
}
