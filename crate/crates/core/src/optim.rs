//! StableAdamW with AMSGrad.
//!
//! Adam moments with bias correction, a running maximum of the corrected
//! second moment, and a per-tensor learning rate shrunk whenever the RMS of
//! the raw update exceeds `clip_rms`:
//!
//! ```text
//! u      = m̂ / (√v̂_max + eps)
//! lr_eff = lr / max(1, RMS(u) / clip_rms)
//! p     ← p·(1 − lr_eff·wd) − lr_eff·u
//! ```

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub clip_rms: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            clip_rms: 1.0,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.weight_decay >= 0.0
            && self.clip_rms > 0.0
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(alloc::format!("invalid optimizer hyperparameters: {self:?}")))
        }
    }
}

/// Moment buffers for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentState<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub v_max: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepReport {
    /// Global L2 norm of all gradients in the step.
    pub grad_norm: f64,
    /// Mean effective learning rate across tensors.
    pub lr_eff: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StableAdamW<T> {
    pub config: OptimizerConfig,
    pub step: u64,
    /// Keyed by parameter name; only tensors that were ever stepped appear.
    pub state: BTreeMap<String, MomentState<T>>,
}

/// One parameter handed to [`StableAdamW::step`].
pub struct ParamUpdate<'a, T> {
    pub name: &'a str,
    pub param: &'a mut Tensor<T>,
    pub grad: &'a Tensor<T>,
}

impl<T: Real> StableAdamW<T> {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(StableAdamW {
            config,
            step: 0,
            state: BTreeMap::new(),
        })
    }

    /// Applies one update to every listed parameter. Nothing is modified if
    /// any gradient is non-finite.
    pub fn step(&mut self, updates: &mut [ParamUpdate<'_, T>]) -> Result<StepReport> {
        let mut sq_norm = 0.0;
        for u in updates.iter() {
            if u.grad.shape() != u.param.shape() {
                return Err(Error::shape("stableadamw_step", u.param.shape(), u.grad.shape()));
            }
            for g in u.grad.data() {
                if !g.is_finite() {
                    return Err(Error::domain(
                        "stableadamw_step",
                        alloc::format!("non-finite gradient in {}", u.name),
                    ));
                }
                sq_norm += g.as_f64() * g.as_f64();
            }
        }
        self.step += 1;
        let cfg = self.config.clone();
        let t = self.step as i32;
        let bc1 = T::from_f64(1.0 - libm::pow(cfg.beta1, t as f64));
        let bc2 = T::from_f64(1.0 - libm::pow(cfg.beta2, t as f64));
        let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
        let eps = T::from_f64(cfg.eps);
        let mut lr_sum = 0.0;
        for u in updates.iter_mut() {
            let shape = u.param.shape().to_vec();
            let st = self.state.entry(String::from(u.name)).or_insert_with(|| MomentState {
                m: Tensor::zeros(shape.clone()),
                v: Tensor::zeros(shape.clone()),
                v_max: Tensor::zeros(shape.clone()),
            });
            let n = u.param.numel();
            let mut raw: Vec<T> = Vec::with_capacity(n);
            let mut rms_acc = 0.0;
            for i in 0..n {
                let g = u.grad.data()[i];
                let m = b1 * st.m.data()[i] + one_b1 * g;
                let v = b2 * st.v.data()[i] + one_b2 * g * g;
                st.m.data_mut()[i] = m;
                st.v.data_mut()[i] = v;
                let v_hat = v / bc2;
                let v_max = st.v_max.data()[i].max(v_hat);
                st.v_max.data_mut()[i] = v_max;
                let step = (m / bc1) / (v_max.sqrt() + eps);
                rms_acc += step.as_f64() * step.as_f64();
                raw.push(step);
            }
            let rms = if n == 0 { 0.0 } else { libm::sqrt(rms_acc / n as f64) };
            let lr_eff = cfg.lr / f64::max(1.0, rms / cfg.clip_rms);
            lr_sum += lr_eff;
            let decay = T::from_f64(1.0 - lr_eff * cfg.weight_decay);
            let lr_t = T::from_f64(lr_eff);
            for (p, s) in u.param.data_mut().iter_mut().zip(raw) {
                *p = *p * decay - lr_t * s;
            }
        }
        Ok(StepReport {
            grad_norm: libm::sqrt(sq_norm),
            lr_eff: if updates.is_empty() { cfg.lr } else { lr_sum / updates.len() as f64 },
        })
    }
}
