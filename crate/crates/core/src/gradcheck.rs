//! Finite-difference audit of every parameter group in double precision.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BackwardFault, Graph};
use crate::data::{generate_sample, Sample};
use crate::error::Result;
use crate::head::SadlrConfig;
use crate::mask::BinaryMask;
use crate::model::Model;
use crate::param::ParamId;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Coordinates audited per group; smaller groups are audited in full.
    pub max_coords: usize,
    pub tolerance: f64,
    /// Half-width of the uniform noise added to every parameter first.
    pub jitter: f64,
    pub fault: Option<BackwardFault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            max_coords: 32,
            tolerance: 1e-3,
            jitter: 0.05,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst coordinate.
    pub worst: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub iterations: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub groups: Vec<GroupResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_err <= self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GroupResult> {
        self.groups
            .iter()
            .filter(|g| g.max_rel_err > self.tolerance)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_err)
            .fold(0.0, f64::max)
    }
}

/// `|a − b| / max(|a|, |b|, 1e-8)`
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central difference `(f(x+h·e) − f(x−h·e)) / 2h` at every coordinate of `x`.
pub fn finite_diff_grad(f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let all: Vec<usize> = (0..x.len()).collect();
    finite_diff_coords(f, x, &all, h)
}

/// Central difference of `f` at the listed coordinates of `x`.
pub fn finite_diff_coords(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    coords: &[usize],
    h: f64,
) -> Vec<f64> {
    let mut x = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn loss_at(
    model: &Model<f64>,
    sample: &Sample,
    pinned: &[BinaryMask],
    gates: &[Vec<bool>],
) -> Result<f64> {
    let mut g = Graph::new().with_relu_pins(gates.to_vec());
    let (loss, _, _) = model.loss(&mut g, sample, Some(pinned))?;
    Ok(g.value(loss).item())
}

/// Audits a jittered desk-scale model with `iterations` refinement steps on
/// one generated sample.
pub fn gradcheck(iterations: usize, seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let cfg = SadlrConfig::desk(iterations);
    let mut model = Model::<f64>::init(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c4d);
    for p in model.store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-opts.jitter..=opts.jitter);
        }
    }
    let sample = generate_sample(seed);
    gradcheck_model(&mut model, &sample, seed, opts)
}

pub fn gradcheck_model(
    model: &mut Model<f64>,
    sample: &Sample,
    seed: u64,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let mut g = Graph::with_fault(opts.fault);
    let (loss, _, out) = model.loss(&mut g, sample, None)?;
    let pinned = out.head.masks;
    let gates = g.relu_gates();
    let grads = g.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0de);
    let ids: Vec<ParamId> = model.store.ids().collect();
    let mut groups = Vec::with_capacity(ids.len());
    for id in ids {
        let numel = model.store.value(id).numel();
        let analytic = grads
            .param(id)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; numel]);
        let coords: Vec<usize> = if numel <= opts.max_coords {
            (0..numel).collect()
        } else {
            let mut c = sample_indices(&mut rng, numel, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let base = model.store.value(id).data().to_vec();
        let mut failure = None;
        let numeric = finite_diff_coords(
            |x| {
                model.store.get_mut(id).value.data_mut().copy_from_slice(x);
                match loss_at(model, sample, &pinned, &gates) {
                    Ok(v) => v,
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            &base,
            &coords,
            opts.step,
        );
        model
            .store
            .get_mut(id)
            .value
            .data_mut()
            .copy_from_slice(&base);
        if let Some(e) = failure {
            return Err(e);
        }
        let mut res = GroupResult {
            name: model.store.get(id).name.clone(),
            coords: coords.len(),
            max_rel_err: 0.0,
            worst: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (k, (&c, &num)) in coords.iter().zip(&numeric).enumerate() {
            let e = rel_err(analytic[c], num);
            if k == 0 || e > res.max_rel_err {
                res.max_rel_err = e;
                res.worst = c;
                res.analytic = analytic[c];
                res.numeric = num;
            }
        }
        groups.push(res);
    }
    Ok(GradcheckReport {
        iterations: model.cfg.iterations,
        seed,
        tolerance: opts.tolerance,
        groups,
    })
}
