use rand::Rng;

use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// Uniform samples in `[-bound, bound)`.
pub fn uniform<T: Real, R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Result<Tensor<T>> {
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)))
}

/// He-style bound for a layer with `fan_in` inputs followed by ReLU.
pub fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

pub fn lecun_bound(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}
