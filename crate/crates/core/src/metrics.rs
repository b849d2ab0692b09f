//! Detection and localization metrics.
//!
//! All curves place thresholds at every distinct score, predicting positive
//! for `score ≥ threshold`. Tied scores therefore move together, which makes
//! every metric invariant to strictly increasing transforms of the scores.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Standard upper FPR bound for the per-region-overlap curve.
pub const DEFAULT_FPR_LIMIT: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub auroc: f64,
    pub ap: f64,
    pub f1_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub auroc: f64,
    pub ap: f64,
    pub f1_max: f64,
    pub aupro: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricCounts {
    pub image_positives: usize,
    pub image_negatives: usize,
    pub pixel_positives: usize,
    pub pixel_negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub image: ImageMetrics,
    pub pixel: PixelMetrics,
    pub counts: MetricCounts,
    /// Image metrics after max-over-views aggregation per physical sample.
    pub sample_level: Option<ImageMetrics>,
}

fn validate(scores: &[f64], labels: &[bool], op: &'static str) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(op, &[scores.len()], &[labels.len()]));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::domain(op, "non-finite score"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Ok((pos, labels.len() - pos))
}

/// Indices sorted by descending score, ties in input order.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Cumulative (true positives, false positives) after each distinct-score group.
fn sweep(scores: &[f64], labels: &[bool]) -> Vec<(usize, usize)> {
    let order = descending(scores);
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (i, &idx) in order.iter().enumerate() {
        if labels[idx] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = order.get(i + 1).is_none_or(|&next| scores[next] != scores[idx]);
        if last_of_group {
            points.push((tp, fp));
        }
    }
    points
}

/// Area under the ROC curve as the tie-aware Mann–Whitney statistic.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = validate(scores, labels, "auroc")?;
    if pos == 0 || neg == 0 {
        return Err(Error::domain("auroc", "both classes must be present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks over ties, 1-based
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Step-interpolated area under the precision–recall curve.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = validate(scores, labels, "average_precision")?;
    if pos == 0 {
        return Err(Error::domain("average_precision", "no positive samples"));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (tp, fp) in sweep(scores, labels) {
        let recall = tp as f64 / pos as f64;
        if recall > prev_recall {
            ap += (recall - prev_recall) * tp as f64 / (tp + fp) as f64;
            prev_recall = recall;
        }
    }
    Ok(ap)
}

/// Best F1 over all distinct-score thresholds.
pub fn f1_max(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = validate(scores, labels, "f1_max")?;
    if pos == 0 {
        return Err(Error::domain("f1_max", "no positive samples"));
    }
    Ok(sweep(scores, labels)
        .into_iter()
        .map(|(tp, fp)| 2.0 * tp as f64 / (pos + tp + fp) as f64)
        .fold(0.0, f64::max))
}

/// 8-connected components of a boolean `h×w` mask; returns per-pixel labels
/// (0 for background, 1.. for regions) and the region count.
pub fn connected_components(mask: &[bool], h: usize, w: usize) -> (Vec<u32>, usize) {
    let mut labels = vec![0u32; h * w];
    let mut count = 0u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (r, c) = ((p / w) as isize, (p % w) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let q = nr as usize * w + nc as usize;
                    if mask[q] && labels[q] == 0 {
                        labels[q] = count;
                        stack.push(q);
                    }
                }
            }
        }
    }
    (labels, count as usize)
}

/// Trapezoid area under `(x, y)` points (ascending x) up to `limit`,
/// interpolating the last segment.
pub fn trapezoid_to(points: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for pair in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y_at = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y_at) / 2.0;
            break;
        }
    }
    area
}

/// Normalized area under the per-region-overlap curve up to `fpr_limit`.
///
/// Regions are the 8-connected components of each mask (values > 0.5).
/// PRO at a threshold is the mean over all regions of the covered fraction;
/// FPR pools every negative pixel of every image.
pub fn aupro<T: Real>(maps: &[Tensor<T>], masks: &[Tensor<T>], fpr_limit: f64) -> Result<f64> {
    if maps.len() != masks.len() {
        return Err(Error::shape("aupro", &[maps.len()], &[masks.len()]));
    }
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::Config("fpr_limit must lie in (0, 1]".into()));
    }
    // per pixel: score and region id (u32::MAX for background)
    let mut pixels: Vec<(f64, u32)> = Vec::new();
    let mut region_sizes: Vec<usize> = Vec::new();
    for (map, mask) in maps.iter().zip(masks) {
        let (h, w) = match *map.shape() {
            [h, w] => (h, w),
            ref s => return Err(Error::shape("aupro", s, &[0, 0])),
        };
        if mask.shape() != map.shape() {
            return Err(Error::shape("aupro", map.shape(), mask.shape()));
        }
        let binary: Vec<bool> = mask.data().iter().map(|v| v.as_f64() > 0.5).collect();
        let (labels, count) = connected_components(&binary, h, w);
        let base = region_sizes.len() as u32;
        region_sizes.extend(core::iter::repeat_n(0, count));
        for (v, &l) in map.data().iter().zip(&labels) {
            let s = v.as_f64();
            if !s.is_finite() {
                return Err(Error::domain("aupro", "non-finite map value"));
            }
            if l == 0 {
                pixels.push((s, u32::MAX));
            } else {
                let id = base + l - 1;
                region_sizes[id as usize] += 1;
                pixels.push((s, id));
            }
        }
    }
    let regions = region_sizes.len();
    if regions == 0 {
        return Err(Error::domain("aupro", "no anomalous regions in the masks"));
    }
    let negatives = pixels.iter().filter(|p| p.1 == u32::MAX).count();
    if negatives == 0 {
        return Err(Error::domain("aupro", "no normal pixels to measure false positives"));
    }
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![(0.0, 0.0)];
    let (mut fp, mut overlap_sum) = (0usize, 0.0f64);
    for (i, &(score, id)) in pixels.iter().enumerate() {
        if id == u32::MAX {
            fp += 1;
        } else {
            overlap_sum += 1.0 / region_sizes[id as usize] as f64;
        }
        if pixels.get(i + 1).is_none_or(|next| next.0 != score) {
            points.push((fp as f64 / negatives as f64, overlap_sum / regions as f64));
        }
    }
    Ok(trapezoid_to(&points, fpr_limit) / fpr_limit)
}
