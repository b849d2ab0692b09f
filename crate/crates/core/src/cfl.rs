//! Cross-feature loss with hard mining.
//!
//! Shallow encoder features are aligned with the deep decoder output and
//! vice versa (`fe1 ↔ f2`, `fe2 ↔ f1`). Per pair, only tokens whose cosine
//! distance reaches the top-10% threshold contribute.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Norm floor inside cosine similarity: `cos = a·b / (max(‖a‖,ε)·max(‖b‖,ε))`.
pub const COSINE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CflConfig {
    /// Fraction of pooled tokens kept per pair.
    pub mining_fraction: f64,
    /// Keep the tokens *below* the threshold instead (ablation).
    pub invert_mining: bool,
    /// Block all gradient through the encoder-side targets.
    pub detach_targets: bool,
}

impl Default for CflConfig {
    fn default() -> Self {
        CflConfig {
            mining_fraction: 0.1,
            invert_mining: false,
            detach_targets: false,
        }
    }
}

/// Per-step summary of the loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: f64,
    /// Mining threshold of each pair.
    pub threshold_h: [f64; 2],
    /// Realized selected fraction of each pair.
    pub selected_fraction: [f64; 2],
    /// Mean distance over the selected tokens of each pair.
    pub per_pair: [f64; 2],
}

/// Cosine distance for plain slices, identical in formula to the taped version.
pub fn cosine_distance<T: Real>(a: &[T], b: &[T]) -> T {
    let eps = T::from_f64(COSINE_EPS);
    let (mut dot, mut na, mut nb) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in a.iter().zip(b) {
        dot = dot + x * y;
        na = na + x * x;
        nb = nb + y * y;
    }
    let na = na.max(eps * eps).sqrt();
    let nb = nb.max(eps * eps).sqrt();
    T::one() - dot / (na * nb)
}

/// `1 − cos(za_i, zb_i)` per token: `[B, N, D] × [B, N, D] → [B, N]`.
pub fn cosine_distance_map<T: Real>(tape: &mut Tape<T>, za: Var, zb: Var) -> Result<Var> {
    let (b, n) = match *tape.shape(za) {
        [b, n, _] => (b, n),
        ref s => return Err(Error::shape("cosine_distance_map", s, &[0, 0, 0])),
    };
    if tape.shape(za) != tape.shape(zb) {
        return Err(Error::shape("cosine_distance_map", tape.shape(za), tape.shape(zb)));
    }
    let eps2 = T::from_f64(COSINE_EPS * COSINE_EPS);
    let prod = tape.mul(za, zb)?;
    let dot = tape.sum(prod, 2)?;
    let norm = |tape: &mut Tape<T>, z: Var| -> Result<Var> {
        let sq = tape.square(z)?;
        let s = tape.sum(sq, 2)?;
        let s = tape.clamp_min(s, eps2)?;
        tape.sqrt(s)
    };
    let na = norm(tape, za)?;
    let nb = norm(tape, zb)?;
    let denom = tape.mul(na, nb)?;
    let cos = tape.div(dot, denom)?;
    let neg = tape.neg(cos)?;
    let dist = tape.add_scalar(neg, T::one())?;
    tape.reshape(dist, [b, n])
}

/// Threshold `h` at rank `ceil(fraction·n)` (largest first, at least 1) and
/// every index scoring `≥ h`; ties at `h` are all kept.
pub fn hard_mining_threshold<T: Real>(scores: &[T], fraction: f64) -> Result<(T, Vec<usize>)> {
    if scores.is_empty() {
        return Err(Error::Contract("hard mining over zero scores".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(alloc::format!("mining fraction {fraction} outside (0, 1]")));
    }
    let k = (libm::ceil(fraction * scores.len() as f64) as usize).clamp(1, scores.len());
    let mut sorted: Vec<T> = scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(core::cmp::Ordering::Equal));
    let h = sorted[k - 1];
    let selected = scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s >= h)
        .map(|(i, _)| i)
        .collect();
    Ok((h, selected))
}

fn check_quad<T: Real>(tape: &Tape<T>, vars: [Var; 4]) -> Result<()> {
    let s0 = tape.shape(vars[0]);
    if s0.len() != 3 {
        return Err(Error::shape("cross_feature_loss", s0, &[0, 0, 0]));
    }
    for v in &vars[1..] {
        if tape.shape(*v) != s0 {
            return Err(Error::shape("cross_feature_loss", s0, tape.shape(*v)));
        }
    }
    Ok(())
}

/// Mined mean distance of one pair; returns (loss term, h, selected fraction).
fn mined_pair<T: Real>(tape: &mut Tape<T>, target: Var, recon: Var, cfg: &CflConfig) -> Result<(Var, f64, f64)> {
    let dist = cosine_distance_map(tape, target, recon)?;
    let scores = tape.value(dist).data().to_vec();
    let (h, mut selected) = hard_mining_threshold(&scores, cfg.mining_fraction)?;
    if cfg.invert_mining {
        let complement: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] < h).collect();
        if !complement.is_empty() {
            selected = complement;
        }
    }
    let weight = T::one() / T::from_f64(selected.len() as f64);
    let mut mask = Tensor::zeros(tape.shape(dist).to_vec());
    for &i in &selected {
        mask.data_mut()[i] = weight;
    }
    let mask = tape.constant(mask);
    let weighted = tape.mul(dist, mask)?;
    let term = tape.sum_all(weighted)?;
    Ok((term, h.as_f64(), selected.len() as f64 / scores.len() as f64))
}

/// `½·(mean_{I₁} Score(fe1, f2) + mean_{I₂} Score(fe2, f1))` with mining over
/// the pooled `B·N` tokens of each pair.
pub fn cross_feature_loss<T: Real>(
    tape: &mut Tape<T>,
    fe1: Var,
    fe2: Var,
    f1: Var,
    f2: Var,
    cfg: &CflConfig,
) -> Result<(Var, LossReport)> {
    check_quad(tape, [fe1, fe2, f1, f2])?;
    let (fe1, fe2) = if cfg.detach_targets {
        (tape.detach(fe1), tape.detach(fe2))
    } else {
        (fe1, fe2)
    };
    let (a, h1, s1) = mined_pair(tape, fe1, f2, cfg)?;
    let (b, h2, s2) = mined_pair(tape, fe2, f1, cfg)?;
    let sum = tape.add(a, b)?;
    let loss = tape.scale(sum, T::from_f64(0.5))?;
    let report = LossReport {
        loss: tape.value(loss).item().as_f64(),
        threshold_h: [h1, h2],
        selected_fraction: [s1, s2],
        per_pair: [tape.value(a).item().as_f64(), tape.value(b).item().as_f64()],
    };
    Ok((loss, report))
}

/// Ablation loss without crossing or mining: mean distance of `fe1 ↔ f1`
/// and `fe2 ↔ f2` over all tokens.
pub fn plain_alignment_loss<T: Real>(
    tape: &mut Tape<T>,
    fe1: Var,
    fe2: Var,
    f1: Var,
    f2: Var,
    cfg: &CflConfig,
) -> Result<(Var, LossReport)> {
    check_quad(tape, [fe1, fe2, f1, f2])?;
    let (fe1, fe2) = if cfg.detach_targets {
        (tape.detach(fe1), tape.detach(fe2))
    } else {
        (fe1, fe2)
    };
    let d1 = cosine_distance_map(tape, fe1, f1)?;
    let d2 = cosine_distance_map(tape, fe2, f2)?;
    let a = tape.mean_all(d1)?;
    let b = tape.mean_all(d2)?;
    let sum = tape.add(a, b)?;
    let loss = tape.scale(sum, T::from_f64(0.5))?;
    let report = LossReport {
        loss: tape.value(loss).item().as_f64(),
        threshold_h: [0.0, 0.0],
        selected_fraction: [1.0, 1.0],
        per_pair: [tape.value(a).item().as_f64(), tape.value(b).item().as_f64()],
    };
    Ok((loss, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mining_top_one_of_ten() {
        let scores: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let (h, idx) = hard_mining_threshold(&scores, 0.1).unwrap();
        assert_eq!(h, 1.0);
        assert_eq!(idx, alloc::vec![9]);
    }

    #[test]
    fn mining_ties_take_everything() {
        let scores = [0.4f64; 7];
        let (h, idx) = hard_mining_threshold(&scores, 0.1).unwrap();
        assert_eq!(h, 0.4);
        assert_eq!(idx.len(), 7);
    }

    #[test]
    fn mining_rejects_empty() {
        assert!(hard_mining_threshold::<f64>(&[], 0.1).is_err());
        assert!(hard_mining_threshold(&[1.0f64], 0.0).is_err());
    }

    #[test]
    fn plain_cosine_cases() {
        assert!(cosine_distance(&[1.0f64, 2.0], &[1.0, 2.0]).abs() < 1e-15);
        assert!((cosine_distance(&[1.0f64, 2.0], &[-1.0, -2.0]) - 2.0).abs() < 1e-15);
        assert!((cosine_distance(&[1.0f64, 0.0], &[0.0, 3.0]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine_distance(&[0.0f64, 0.0], &[1.0, 1.0]), 1.0);
    }
}
