//! Per-pixel anomaly maps and the image score derived from them.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cfl::cosine_distance;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::resample::{bilinear_upsample, gaussian_blur};
use crate::tensor::Tensor;

/// Image size at which the reference smoothing sigma of 4 applies.
pub const REFERENCE_IMAGE_SIZE: f64 = 392.0;
pub const REFERENCE_SIGMA: f64 = 4.0;

/// Blur sigma scaled to the output resolution.
pub fn default_sigma(out_size: usize) -> f64 {
    REFERENCE_SIGMA * out_size as f64 / REFERENCE_IMAGE_SIZE
}

/// How the smoothed map is collapsed into the image score `S`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreReduction {
    /// Mean of the top 1% pixels.
    #[default]
    TopPercent,
    Max,
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyResult<T> {
    /// `[H, W]` smoothed per-pixel scores.
    pub map: Tensor<T>,
    pub score: T,
    pub grid: (usize, usize),
}

/// `½·[(1 − cos(fe1_i, f2_i)) + (1 − cos(fe2_i, f1_i))]` for every token of
/// one image; each input is `[N, D]`.
pub fn token_scores<T: Real>(fe1: &Tensor<T>, fe2: &Tensor<T>, f1: &Tensor<T>, f2: &Tensor<T>) -> Result<Vec<T>> {
    let shape = fe1.shape();
    if shape.len() != 2 {
        return Err(Error::shape("token_scores", shape, &[0, 0]));
    }
    for t in [fe2, f1, f2] {
        if t.shape() != shape {
            return Err(Error::shape("token_scores", shape, t.shape()));
        }
    }
    let d = shape[1];
    let half = T::from_f64(0.5);
    Ok((0..shape[0])
        .map(|i| {
            let s = i * d..(i + 1) * d;
            let a = cosine_distance(&fe1.data()[s.clone()], &f2.data()[s.clone()]);
            let b = cosine_distance(&fe2.data()[s.clone()], &f1.data()[s]);
            half * (a + b)
        })
        .collect())
}

pub fn image_score<T: Real>(map: &Tensor<T>, reduction: ScoreReduction) -> T {
    let values = map.data();
    match reduction {
        ScoreReduction::Max => values.iter().copied().fold(T::neg_infinity(), T::max),
        ScoreReduction::Mean => values.iter().copied().sum::<T>() / T::from_f64(values.len() as f64),
        ScoreReduction::TopPercent => {
            let k = (libm::ceil(values.len() as f64 * 0.01) as usize).max(1);
            let mut sorted = values.to_vec();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(core::cmp::Ordering::Equal));
            sorted[..k].iter().copied().sum::<T>() / T::from_f64(k as f64)
        }
    }
}

/// Token scores reshaped to `grid`, upsampled to `out_size`, blurred, and
/// reduced to the image score.
pub fn anomaly_map<T: Real>(
    fe1: &Tensor<T>,
    fe2: &Tensor<T>,
    f1: &Tensor<T>,
    f2: &Tensor<T>,
    grid: (usize, usize),
    out_size: (usize, usize),
    sigma: f64,
    reduction: ScoreReduction,
) -> Result<AnomalyResult<T>> {
    let tokens = token_scores(fe1, fe2, f1, f2)?;
    if tokens.len() != grid.0 * grid.1 {
        return Err(Error::shape("anomaly_map", &[tokens.len()], &[grid.0, grid.1]));
    }
    if out_size.0 < grid.0 || out_size.1 < grid.1 {
        return Err(Error::Config("output size smaller than the token grid".into()));
    }
    let coarse = Tensor::new([grid.0, grid.1], tokens)?;
    let up = bilinear_upsample(&coarse, out_size.0, out_size.1)?;
    let map = gaussian_blur(&up, sigma)?;
    if !map.all_finite() {
        return Err(Error::NonFinite { op: "anomaly_map" });
    }
    let score = image_score(&map, reduction);
    Ok(AnomalyResult { map, score, grid })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_percent_of_small_map_is_max() {
        let m = Tensor::<f64>::from_fn([4, 4], |i| i as f64);
        assert_eq!(image_score(&m, ScoreReduction::TopPercent), 15.0);
        assert_eq!(image_score(&m, ScoreReduction::Max), 15.0);
        assert_eq!(image_score(&m, ScoreReduction::Mean), 7.5);
    }

    #[test]
    fn top_percent_averages_ceil_one_percent() {
        // 32x32 → 1024 pixels → ceil(10.24) = 11 largest
        let m = Tensor::<f64>::from_fn([32, 32], |i| i as f64);
        let expect = (1013..1024).map(|v| v as f64).sum::<f64>() / 11.0;
        assert_eq!(image_score(&m, ScoreReduction::TopPercent), expect);
    }

    #[test]
    fn desk_sigma() {
        assert!((default_sigma(392) - 4.0).abs() < 1e-15);
        assert!((default_sigma(32) - 4.0 * 32.0 / 392.0).abs() < 1e-15);
    }
}
