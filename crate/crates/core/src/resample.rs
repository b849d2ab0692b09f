//! Map resampling used when turning token grids into pixel heatmaps.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

fn check_2d<T: Real>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize)> {
    match *x.shape() {
        [h, w] if h > 0 && w > 0 => Ok((h, w)),
        _ => Err(Error::shape(op, x.shape(), &[0, 0])),
    }
}

/// Source coordinate and blend weight for half-pixel-centred resampling.
fn source_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (libm::floor(src) as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear interpolation of an `[h, w]` map to `[out_h, out_w]` with
/// half-pixel centres (no corner alignment); coordinates left of the first
/// centre clamp to the edge.
pub fn bilinear_upsample<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (h, w) = check_2d("bilinear_upsample", x)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config("upsample target must be at least 1x1".into()));
    }
    let rows = source_taps(out_h, h);
    let cols = source_taps(out_w, w);
    let src = x.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(r0, r1, fy) in &rows {
        for &(c0, c1, fx) in &cols {
            let at = |r: usize, c: usize| src[r * w + c].as_f64();
            let top = at(r0, c0) * (1.0 - fx) + at(r0, c1) * fx;
            let bottom = at(r1, c0) * (1.0 - fx) + at(r1, c1) * fx;
            out.push(T::from_f64(top * (1.0 - fy) + bottom * fy));
        }
    }
    Tensor::new([out_h, out_w], out)
}

/// Normalized Gaussian taps with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = libm::ceil(3.0 * sigma) as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|d| libm::exp(-((d * d) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable Gaussian blur with edge clamping; `sigma == 0` is the identity.
pub fn gaussian_blur<T: Real>(x: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    let (h, w) = check_2d("gaussian_blur", x)?;
    if !(sigma >= 0.0) {
        return Err(Error::Config("blur sigma must be non-negative".into()));
    }
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let src: Vec<f64> = x.data().iter().map(|v| v.as_f64()).collect();
    let clamp = |i: i64, n: usize| i.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(t, k)| k * src[r * w + clamp(c as i64 + t as i64 - radius, w)])
                .sum();
        }
    }
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let v: f64 = kernel
                .iter()
                .enumerate()
                .map(|(t, k)| k * tmp[clamp(r as i64 + t as i64 - radius, h) * w + c])
                .sum();
            out.push(T::from_f64(v));
        }
    }
    Tensor::new([h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_stays_constant() {
        let x = Tensor::<f64>::full([3, 5], 0.25);
        let up = bilinear_upsample(&x, 7, 11).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let blurred = gaussian_blur(&up, 1.3).unwrap();
        assert!(blurred.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn zero_sigma_is_identity() {
        let x = Tensor::<f32>::from_fn([4, 4], |i| (i * 7 % 5) as f32);
        assert_eq!(gaussian_blur(&x, 0.0).unwrap(), x);
    }

    #[test]
    fn kernel_radius_and_normalization() {
        let k = gaussian_kernel(1.2);
        assert_eq!(k.len(), 2 * 4 + 1);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_shapes() {
        let x = Tensor::<f64>::zeros([2, 2, 2]);
        assert!(bilinear_upsample(&x, 4, 4).is_err());
        let y = Tensor::<f64>::zeros([2, 2]);
        assert!(bilinear_upsample(&y, 0, 4).is_err());
        assert!(gaussian_blur(&y, -1.0).is_err());
    }
}
