//! Naive reference implementations written straight from the definitions.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sadlr::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
}

pub fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

/// Sliding-window cross-correlation; the last partial window is dropped.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    (cin, h, w): (usize, usize, usize),
    wt: &[f64],
    b: &[f64],
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = b[co];
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as i64 - pad as i64;
                            let ix = (ox * stride + kx) as i64 - pad as i64;
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                continue;
                            }
                            s += wt[((co * cin + ci) * k + ky) * k + kx]
                                * x[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = s;
            }
        }
    }
    (out, oh, ow)
}

pub fn layer_norm(
    x: &[f64],
    c: usize,
    hw: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; c * hw];
    for p in 0..hw {
        let col: Vec<f64> = (0..c).map(|ch| x[ch * hw + p]).collect();
        let mean = col.iter().sum::<f64>() / c as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        for ch in 0..c {
            out[ch * hw + p] = gamma[ch] * (col[ch] - mean) / (var + eps).sqrt() + beta[ch];
        }
    }
    out
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub fn softmax2(x: &[f64], hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; 2 * hw];
    for p in 0..hw {
        let (a, b) = (x[p], x[hw + p]);
        let e0 = 1.0 / (1.0 + (b - a).exp());
        out[p] = e0;
        out[hw + p] = 1.0 - e0;
    }
    out
}

/// Half-pixel-center bilinear sampling with edge clamping.
pub fn upsample(x: &[f64], c: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (oh, ow) = (h * f, w * f);
    let src = |o: usize, extent: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (extent - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(extent - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            let (y0, y1, ty) = src(oy, h);
            for ox in 0..ow {
                let (x0, x1, tx) = src(ox, w);
                let at = |yy: usize, xx: usize| x[(ch * h + yy) * w + xx];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                let bot = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                out[(ch * oh + oy) * ow + ox] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

pub fn dice(prob: &[f64], gt: &[u8], eps: f64) -> f64 {
    let inter: f64 = prob.iter().zip(gt).map(|(p, &g)| p * g as f64).sum();
    let ps: f64 = prob.iter().sum();
    let gs: f64 = gt.iter().map(|&g| g as f64).sum();
    1.0 - (2.0 * inter + eps) / (ps + gs + eps)
}
