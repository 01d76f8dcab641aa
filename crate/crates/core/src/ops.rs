//! Forward kernels on plain tensors, plus the raw slice routines the tape
//! reuses for backward rules.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    let (k_, n_) = (k as isize, n as isize);
    // SAFETY: extents and row-major strides stay within the checked lengths
    unsafe {
        T::gemm(
            m,
            k,
            n,
            a.as_ptr(),
            (k_, 1),
            b.as_ptr(),
            (n_, 1),
            out.as_mut_ptr(),
            (n_, 1),
        );
    }
}

/// `out[m×k] += a[m×n] · b[k×n]ᵀ`
pub(crate) fn gemm_abt_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    assert!(a.len() >= m * n && b.len() >= k * n && out.len() >= m * k);
    let (k_, n_) = (k as isize, n as isize);
    // SAFETY: b is read as its transpose through swapped strides
    unsafe {
        T::gemm(
            m,
            n,
            k,
            a.as_ptr(),
            (n_, 1),
            b.as_ptr(),
            (1, n_),
            out.as_mut_ptr(),
            (k_, 1),
        );
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn gemm_atb_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= m * n && out.len() >= k * n);
    let (k_, n_) = (k as isize, n as isize);
    // SAFETY: a is read as its transpose through swapped strides
    unsafe {
        T::gemm(
            k,
            m,
            n,
            a.as_ptr(),
            (1, k_),
            b.as_ptr(),
            (n_, 1),
            out.as_mut_ptr(),
            (n_, 1),
        );
    }
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_acc(a.data(), b.data(), &mut out, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn transpose<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.dims2("transpose")?;
    let src = a.data();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// Geometry of a square-kernel 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        b_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        Self::build(x_shape, w_shape, b_shape, stride, pad, false)
    }

    /// Like `new`, but a trailing partial window is dropped instead of
    /// rejected (floor rounding of the output extent).
    pub fn new_floor(
        x_shape: &[usize],
        w_shape: &[usize],
        b_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        Self::build(x_shape, w_shape, b_shape, stride, pad, true)
    }

    fn build(
        x_shape: &[usize],
        w_shape: &[usize],
        b_shape: &[usize],
        stride: usize,
        pad: usize,
        floor: bool,
    ) -> Result<Self> {
        let (cin, h, w) = match x_shape {
            &[c, h, w] => (c, h, w),
            _ => return Err(Error::dim("conv2d", x_shape, w_shape)),
        };
        let (cout, k) = match w_shape {
            &[co, ci, kh, kw] if ci == cin && kh == kw => (co, kh),
            _ => return Err(Error::dim("conv2d", x_shape, w_shape)),
        };
        if b_shape.iter().product::<usize>() != cout {
            return Err(Error::dim("conv2d bias", w_shape, b_shape));
        }
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv2d kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let span_h = h + 2 * pad;
        let span_w = w + 2 * pad;
        let ragged = !(span_h - k.min(span_h)).is_multiple_of(stride)
            || !(span_w - k.min(span_w)).is_multiple_of(stride);
        if span_h < k || span_w < k || (ragged && !floor) {
            return Err(Error::Config(format!(
                "conv2d output extent not integral: input {h}x{w}, kernel {k}, stride {stride}, pad {pad}"
            )));
        }
        Ok(Self {
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            oh: (span_h - k) / stride + 1,
            ow: (span_w - k) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn out_len(&self) -> usize {
        self.oh * self.ow
    }

    /// Multiply-adds of one forward pass.
    pub fn macs(&self) -> u64 {
        (self.cout * self.patch_len() * self.out_len()) as u64
    }
}

/// Unfold `x` into a `(cin·k·k) × (oh·ow)` patch matrix.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.out_len();
    let mut cols = vec![T::zero(); g.patch_len() * p];
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[oy * g.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold a patch-matrix gradient back onto the input grid (adjoint of `im2col`).
pub(crate) fn col2im_acc<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.out_len();
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_with_cols<T: Real>(w: &[T], b: &[T], cols: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.out_len();
    let mut out = vec![T::zero(); g.cout * p];
    for (co, row) in out.chunks_mut(p).enumerate() {
        row.iter_mut().for_each(|v| *v = b[co]);
    }
    gemm_acc(w, cols, &mut out, g.cout, g.patch_len(), p);
    out
}

pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), b.shape(), stride, pad)?;
    let cols = im2col(x.data(), &g);
    let out = conv2d_with_cols(w.data(), b.data(), &cols, &g);
    Ok(Tensor::from_parts(vec![g.cout, g.oh, g.ow], out))
}

/// Per-location statistics kept for the layer-norm backward rule.
pub(crate) struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Normalizes each spatial location's channel vector; `x` is `C×P` flattened.
pub(crate) fn layer_norm_raw<T: Real>(
    x: &[T],
    c: usize,
    p: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, LayerNormCache<T>) {
    let inv_c = T::one() / T::of(c as f64);
    let mut mean = vec![T::zero(); p];
    for ch in 0..c {
        for (m, &v) in mean.iter_mut().zip(&x[ch * p..(ch + 1) * p]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv_c);
    let mut var = vec![T::zero(); p];
    for ch in 0..c {
        for ((s, &v), &m) in var.iter_mut().zip(&x[ch * p..(ch + 1) * p]).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    let inv_std: Vec<T> = var
        .iter()
        .map(|&s| (s * inv_c + eps).sqrt().recip())
        .collect();
    let mut xhat = vec![T::zero(); c * p];
    let mut y = vec![T::zero(); c * p];
    for ch in 0..c {
        let (g, bt) = (gamma[ch], beta[ch]);
        for i in 0..p {
            let xh = (x[ch * p + i] - mean[i]) * inv_std[i];
            xhat[ch * p + i] = xh;
            y[ch * p + i] = g * xh + bt;
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3("layer_norm")?;
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::dim("layer_norm", x.shape(), gamma.shape()));
    }
    if eps <= T::zero() {
        return Err(Error::Contract("layer_norm eps must be positive".into()));
    }
    let (y, _) = layer_norm_raw(x.data(), c, h * w, gamma.data(), beta.data(), eps);
    Ok(Tensor::from_parts(vec![c, h, w], y))
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// Per-pixel two-way softmax over the channel axis.
pub fn softmax_channel<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3("softmax_channel")?;
    if c != 2 {
        return Err(Error::Shape {
            shape: x.shape().to_vec(),
            reason: "softmax_channel expects exactly 2 channels".into(),
        });
    }
    let p = h * w;
    let d = x.data();
    let mut out = vec![T::zero(); 2 * p];
    for i in 0..p {
        let (a, b) = (d[i], d[p + i]);
        let m = a.max(b);
        let (ea, eb) = ((a - m).exp(), (b - m).exp());
        let z = ea + eb;
        out[i] = ea / z;
        out[p + i] = eb / z;
    }
    Ok(Tensor::from_parts(vec![2, h, w], out))
}

/// Source taps for one axis of half-pixel bilinear resampling.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap<T> {
    pub i0: usize,
    pub i1: usize,
    pub w1: T,
}

pub(crate) fn bilinear_taps<T: Real>(extent: usize, factor: usize) -> Vec<Tap<T>> {
    let last = (extent - 1) as f64;
    (0..extent * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, last);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(extent - 1);
            Tap {
                i0,
                i1,
                w1: T::of(src - i0 as f64),
            }
        })
        .collect()
}

pub(crate) fn upsample_raw<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<T> {
    let ty = bilinear_taps::<T>(h, factor);
    let tx = bilinear_taps::<T>(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, ry) in ty.iter().enumerate() {
            let r0 = &src[ry.i0 * w..(ry.i0 + 1) * w];
            let r1 = &src[ry.i1 * w..(ry.i1 + 1) * w];
            for (ox, rx) in tx.iter().enumerate() {
                let top = r0[rx.i0] + (r0[rx.i1] - r0[rx.i0]) * rx.w1;
                let bot = r1[rx.i0] + (r1[rx.i1] - r1[rx.i0]) * rx.w1;
                dst[oy * ow + ox] = top + (bot - top) * ry.w1;
            }
        }
    }
    out
}

pub(crate) fn upsample_backward_acc<T: Real>(
    dy: &[T],
    c: usize,
    h: usize,
    w: usize,
    factor: usize,
    dx: &mut [T],
) {
    let ty = bilinear_taps::<T>(h, factor);
    let tx = bilinear_taps::<T>(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    for ch in 0..c {
        let g = &dy[ch * oh * ow..(ch + 1) * oh * ow];
        let d = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, ry) in ty.iter().enumerate() {
            let wy0 = T::one() - ry.w1;
            for (ox, rx) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                let wx0 = T::one() - rx.w1;
                d[ry.i0 * w + rx.i0] += v * wy0 * wx0;
                d[ry.i0 * w + rx.i1] += v * wy0 * rx.w1;
                d[ry.i1 * w + rx.i0] += v * ry.w1 * wx0;
                d[ry.i1 * w + rx.i1] += v * ry.w1 * rx.w1;
            }
        }
    }
}

pub fn bilinear_upsample<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3("bilinear_upsample")?;
    if factor == 0 {
        return Err(Error::Config("upsample factor must be at least 1".into()));
    }
    let out = upsample_raw(x.data(), c, h, w, factor);
    Ok(Tensor::from_parts(vec![c, h * factor, w * factor], out))
}

/// Gathers table rows into columns: output is `C_l × ids.len()`.
pub fn embedding_lookup<T: Real>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    let (v, cl) = table.dims2("embedding_lookup")?;
    if ids.is_empty() {
        return Err(Error::Contract(
            "embedding_lookup needs at least one id".into(),
        ));
    }
    let n = ids.len();
    let mut out = vec![T::zero(); cl * n];
    for (t, &id) in ids.iter().enumerate() {
        if id >= v {
            return Err(Error::Index {
                what: "embedding id",
                index: id,
                bound: v,
            });
        }
        for c in 0..cl {
            out[c * n + t] = table.data()[id * cl + c];
        }
    }
    Ok(Tensor::from_parts(vec![cl, n], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul(&a, &eye).unwrap(), a);
        let col = t(&[2, 1], &[5.0, 6.0]);
        assert_eq!(matmul(&a, &col).unwrap().data(), &[17.0, 39.0]);
        let z = Tensor::zeros(&[2, 3]).unwrap();
        assert!(matmul(&a, &z).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let a = t(&[2, 3], &[0.0; 6]);
        let err = matmul(&a, &a).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn conv_identity_and_bias() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 3], |i| i as f64 * 0.5 - 2.0).unwrap();
        let w = t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2], &[0.0, 0.0]);
        assert_eq!(conv2d(&x, &w, &b, 1, 0).unwrap(), x);

        let w0 = Tensor::zeros(&[3, 2, 3, 3]).unwrap();
        let b0 = t(&[3], &[1.5, 1.5, 1.5]);
        let out = conv2d(&x, &w0, &b0, 1, 1).unwrap();
        assert_eq!(out.shape(), &[3, 3, 3]);
        assert!(out.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn conv_rejects_non_integral_extent() {
        let x = Tensor::<f64>::zeros(&[1, 4, 4]).unwrap();
        let w = Tensor::zeros(&[1, 1, 3, 3]).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        assert!(matches!(conv2d(&x, &w, &b, 2, 0), Err(Error::Config(_))));
        let w_even = Tensor::zeros(&[1, 1, 2, 2]).unwrap();
        assert!(conv2d(&x, &w_even, &b, 1, 0).is_err());
    }

    #[test]
    fn layer_norm_edge_cases() {
        let x = t(&[3, 1, 2], &[2.0, -1.0, 2.0, -1.0, 2.0, -1.0]);
        let ones = t(&[3], &[1.0; 3]);
        let zeros = t(&[3], &[0.0; 3]);
        let y = layer_norm(&x, &ones, &zeros, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let b = t(&[3], &[0.25, 0.25, 0.25]);
        let x2 = t(&[3, 1, 1], &[1.0, 5.0, -3.0]);
        let y2 = layer_norm(&x2, &zeros, &b, 1e-5).unwrap();
        assert!(y2.data().iter().all(|&v| v == 0.25));
        assert!(layer_norm(&x2, &ones, &b, 0.0).is_err());
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&t(&[3], &[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        assert!(relu(&t(&[2], &[-3.0, -0.1]))
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_channel(&t(&[2, 1, 1], &[0.0, 0.0])).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        let p = softmax_channel(&t(&[2, 1, 1], &[0.0, 3f64.ln()])).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-15 && (p.data()[1] - 0.75).abs() < 1e-15);
        let a = softmax_channel(&t(&[2, 1, 1], &[1.0, 3.0])).unwrap();
        let b = softmax_channel(&t(&[2, 1, 1], &[101.0, 103.0])).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-15);
        assert!(softmax_channel(&t(&[3, 1, 1], &[0.0; 3])).is_err());
    }

    #[test]
    fn upsample_examples() {
        let row = t(&[1, 1, 2], &[0.0, 2.0]);
        let up = bilinear_upsample(&row, 2).unwrap();
        assert_eq!(up.shape(), &[1, 2, 4]);
        assert_eq!(&up.data()[..4], &[0.0, 0.5, 1.5, 2.0]);
        let x = Tensor::<f64>::from_fn(&[2, 3, 2], |i| i as f64).unwrap();
        assert_eq!(bilinear_upsample(&x, 1).unwrap(), x);
        let c = Tensor::<f64>::full(&[1, 3, 3], 0.7).unwrap();
        assert!(bilinear_upsample(&c, 4)
            .unwrap()
            .data()
            .iter()
            .all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn embedding_examples() {
        let table = Tensor::<f64>::from_fn(&[3, 2], |i| i as f64).unwrap();
        let l = embedding_lookup(&table, &[0]).unwrap();
        assert_eq!(l.data(), &[0.0, 1.0]);
        let l = embedding_lookup(&table, &[2, 1]).unwrap();
        assert_eq!(l.shape(), &[2, 2]);
        assert_eq!(l.data(), &[4.0, 2.0, 5.0, 3.0]);
        assert!(matches!(
            embedding_lookup(&table, &[3]),
            Err(Error::Index { index: 3, .. })
        ));
    }
}
