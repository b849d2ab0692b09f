//! Trainable pre-encoder prior gate.
//!
//! Acts on the raw image tensor `[B, C, H, W]` before patching:
//!
//! 1. `X̃ = γ_c·(X − μ_c)/(σ_c + eps)` with per-image, per-channel statistics
//! 2. `α_c = |γ_c| / Σ_k |γ_k|`
//! 3. `X^ch = sigmoid(α_c·X̃) ⊙ X`
//! 4. `M = mean_c X^ch`, `β = M / Σ_{h,w} M` per image
//! 5. `X^prior = sigmoid(β ⊙ X^ch) ⊙ X^ch`

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Added to the population standard deviation in the weighted normalization.
pub const SIGMA_EPS: f64 = 1e-5;

/// Trainable scale vector of the gate, one entry per image channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorGateParams<P> {
    pub gamma: P,
}

impl<T: Real> PriorGateParams<Tensor<T>> {
    /// `γ = 1` for every channel.
    pub fn init(channels: usize) -> Self {
        PriorGateParams {
            gamma: Tensor::ones([channels]),
        }
    }
}

impl<P> PriorGateParams<P> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(alloc::string::String, &'a P)) {
        f(alloc::format!("{prefix}.gamma"), &self.gamma);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(alloc::string::String, &'a mut P)) {
        f(alloc::format!("{prefix}.gamma"), &mut self.gamma);
    }

    pub fn try_map<Q, E>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Result<Q, E>) -> Result<PriorGateParams<Q>, E> {
        Ok(PriorGateParams {
            gamma: f(&alloc::format!("{prefix}.gamma"), &self.gamma)?,
        })
    }
}

/// Intermediate values of one gate evaluation.
#[derive(Debug, Clone, Copy)]
pub struct GateTrace {
    /// `[C]`
    pub alpha: Var,
    /// `[B, H, W]`
    pub beta: Var,
    pub x_ch: Var,
    pub x_prior: Var,
}

fn dims4<T: Real>(tape: &Tape<T>, x: Var, op: &'static str) -> Result<[usize; 4]> {
    match *tape.shape(x) {
        [b, c, h, w] => Ok([b, c, h, w]),
        ref s => Err(Error::shape(op, s, &[0, 0, 0, 0])),
    }
}

/// Per-image, per-channel standardization scaled by `γ_c`.
pub fn weighted_norm<T: Real>(tape: &mut Tape<T>, x: Var, gamma: Var, eps: T) -> Result<Var> {
    let [b, c, h, w] = dims4(tape, x, "weighted_norm")?;
    if tape.shape(gamma) != [c] {
        return Err(Error::shape("weighted_norm", tape.shape(gamma), &[c]));
    }
    let flat = tape.reshape(x, [b, c, h * w])?;
    let mu = tape.mean(flat, 2)?;
    let centered = tape.sub(flat, mu)?;
    let sq = tape.square(centered)?;
    let var = tape.mean(sq, 2)?;
    let sigma = tape.sqrt(var)?;
    let denom = tape.add_scalar(sigma, eps)?;
    let standardized = tape.div(centered, denom)?;
    let g = tape.reshape(gamma, [c, 1])?;
    let scaled = tape.mul(standardized, g)?;
    tape.reshape(scaled, [b, c, h, w])
}

/// `α_c = |γ_c| / Σ_k |γ_k|`.
pub fn channel_weights<T: Real>(tape: &mut Tape<T>, gamma: Var) -> Result<Var> {
    let total: f64 = tape.value(gamma).data().iter().map(|g| g.as_f64().abs()).sum();
    if total < crate::tape::MIN_DENOMINATOR {
        return Err(Error::domain("channel_weights", "all channel scales are zero"));
    }
    let magnitude = tape.abs(gamma)?;
    let sum = tape.sum(magnitude, 0)?;
    tape.div(magnitude, sum)
}

/// `X^ch = sigmoid(α_c · X̃) ⊙ X`.
pub fn channel_gate<T: Real>(tape: &mut Tape<T>, x: Var, x_norm: Var, alpha: Var) -> Result<Var> {
    let [_, c, _, _] = dims4(tape, x, "channel_gate")?;
    if tape.shape(x_norm) != tape.shape(x) {
        return Err(Error::shape("channel_gate", tape.shape(x_norm), tape.shape(x)));
    }
    if tape.shape(alpha) != [c] {
        return Err(Error::shape("channel_gate", tape.shape(alpha), &[c]));
    }
    let a = tape.reshape(alpha, [c, 1, 1])?;
    let logits = tape.mul(x_norm, a)?;
    let gate = tape.sigmoid(logits)?;
    tape.mul(gate, x)
}

fn spatial_weights_inner<T: Real>(tape: &mut Tape<T>, x_ch: Var, pass_zero_images: bool) -> Result<Var> {
    let [b, _, h, w] = dims4(tape, x_ch, "spatial_weights")?;
    let m = tape.mean(x_ch, 1)?;
    let m = tape.reshape(m, [b, h * w])?;
    let total = tape.sum(m, 1)?;
    let min = T::from_f64(crate::tape::MIN_DENOMINATOR);
    let mut offset = Vec::with_capacity(b);
    for (img, t) in tape.value(total).data().iter().enumerate() {
        if t.abs() >= min {
            offset.push(T::zero());
            continue;
        }
        let row = &tape.value(m).data()[img * h * w..(img + 1) * h * w];
        // An all-zero image has M ≡ 0, so any finite β gives the same output.
        if pass_zero_images && row.iter().all(|v| *v == T::zero()) {
            offset.push(T::one());
        } else {
            return Err(Error::domain(
                "spatial_weights",
                alloc::format!("channel-mean map of image {img} sums to ~0"),
            ));
        }
    }
    let denom = if offset.iter().all(|o| *o == T::zero()) {
        total
    } else {
        let off = tape.constant(Tensor::new([b, 1], offset)?);
        tape.add(total, off)?
    };
    let beta = tape.div(m, denom)?;
    tape.reshape(beta, [b, h, w])
}

/// `β = M / Σ M` with `M` the channel mean of `X^ch`, per image.
///
/// Fails when an image's `Σ M` is within 1e-12 of zero.
pub fn spatial_weights<T: Real>(tape: &mut Tape<T>, x_ch: Var) -> Result<Var> {
    spatial_weights_inner(tape, x_ch, false)
}

/// `X^prior = sigmoid(β ⊙ X^ch) ⊙ X^ch`.
pub fn spatial_gate<T: Real>(tape: &mut Tape<T>, x_ch: Var, beta: Var) -> Result<Var> {
    let [b, _, h, w] = dims4(tape, x_ch, "spatial_gate")?;
    if tape.shape(beta) != [b, h, w] {
        return Err(Error::shape("spatial_gate", tape.shape(beta), &[b, h, w]));
    }
    let bb = tape.reshape(beta, [b, 1, h, w])?;
    let logits = tape.mul(x_ch, bb)?;
    let gate = tape.sigmoid(logits)?;
    tape.mul(gate, x_ch)
}

/// Full gate. Images that are identically zero pass through as zero instead
/// of tripping the `Σ M ≈ 0` check.
pub fn prior_forward<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    params: &PriorGateParams<Var>,
) -> Result<(Var, GateTrace)> {
    let x_norm = weighted_norm(tape, x, params.gamma, T::from_f64(SIGMA_EPS))?;
    let alpha = channel_weights(tape, params.gamma)?;
    let x_ch = channel_gate(tape, x, x_norm, alpha)?;
    let beta = spatial_weights_inner(tape, x_ch, true)?;
    let x_prior = spatial_gate(tape, x_ch, beta)?;
    Ok((
        x_prior,
        GateTrace {
            alpha,
            beta,
            x_ch,
            x_prior,
        },
    ))
}
