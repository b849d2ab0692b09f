//! End-to-end assembly: prior gate → frozen backbone → amplification →
//! decoder → loss, with the three component toggles used for ablations.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::aam::{self, AamConfig, AamParams, AamTrace};
use crate::backbone::{self, BackboneConfig, BackboneParams, FeaturePair};
use crate::block::{self, WeightInit};
use crate::cfl::{self, CflConfig, LossReport};
use crate::decoder::{self, DecoderConfig, DecoderParams};
use crate::error::{Error, Result};
use crate::init::Initializer;
use crate::optim::{ParamUpdate, StableAdamW, StepReport};
use crate::prior_gate::{self, GateTrace, PriorGateParams};
use crate::real::Real;
use crate::scoring::{self, AnomalyResult, ScoreReduction};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Independent component switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    /// Prior gate in front of the backbone; identity when off.
    pub sfe_enabled: bool,
    /// Amplification module; identity bottleneck when off.
    pub aam_enabled: bool,
    /// Crossed, mined loss; plain uncrossed alignment over all tokens when off.
    pub cfl_enabled: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            sfe_enabled: true,
            aam_enabled: true,
            cfl_enabled: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub aam: AamConfig,
    pub decoder: DecoderConfig,
    pub cfl: CflConfig,
    pub toggles: Toggles,
    /// Seed for the trainable parameters (the backbone has its own).
    pub init_seed: u64,
}


impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.backbone.depth == 0 {
            return Err(Error::Config("the model needs at least one backbone block".into()));
        }
        self.decoder.validate(self.backbone.embed_dim)?;
        let d = self.backbone.embed_dim;
        if self.aam.heads == 0 || !d.is_multiple_of(self.aam.heads) {
            return Err(Error::Config(alloc::format!("embed_dim {d} not divisible by {} AAM heads", self.aam.heads)));
        }
        if !(self.aam.temp_init > 0.0) {
            return Err(Error::Config("AAM temperature must start strictly positive".into()));
        }
        if !(self.cfl.mining_fraction > 0.0 && self.cfl.mining_fraction <= 1.0) {
            return Err(Error::Config("mining fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Every parameter of the model, frozen and trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<P> {
    pub prior_gate: PriorGateParams<P>,
    pub backbone: BackboneParams<P>,
    pub aam: AamParams<P>,
    pub decoder: DecoderParams<P>,
}

impl<P> ModelParams<P> {
    /// Visits every tensor with its checkpoint name, in a fixed order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a P)) {
        self.prior_gate.visit("prior_gate", f);
        self.backbone.visit("backbone", f);
        self.aam.visit("aam", f);
        self.decoder.visit("decoder", f);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut P)) {
        self.prior_gate.visit_mut("prior_gate", f);
        self.backbone.visit_mut("backbone", f);
        self.aam.visit_mut("aam", f);
        self.decoder.visit_mut("decoder", f);
    }

    pub fn try_map<Q, E>(&self, f: &mut dyn FnMut(&str, &P) -> Result<Q, E>) -> Result<ModelParams<Q>, E> {
        Ok(ModelParams {
            prior_gate: self.prior_gate.try_map("prior_gate", f)?,
            backbone: self.backbone.try_map("backbone", f)?,
            aam: self.aam.try_map("aam", f)?,
            decoder: self.decoder.try_map("decoder", f)?,
        })
    }
}

/// Named handles of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub input: Var,
    pub gate: Option<GateTrace>,
    pub features: FeaturePair,
    /// Deepest backbone output after the final (affine-free) encoder norm;
    /// the amplification module's input.
    pub f_i: Var,
    /// Decoder input.
    pub f_m: Var,
    pub aam: Option<AamTrace>,
    pub f1: Var,
    pub f2: Var,
}

/// Parameters recorded on a tape plus the handles that receive gradients.
pub struct Bound {
    pub params: ModelParams<Var>,
    pub trainable: Vec<(String, Var)>,
}

/// Outcome of [`Model::train_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStep {
    pub loss: LossReport,
    pub optimizer: StepReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor<T>>,
}

impl<T: Real> Model<T> {
    /// Seeded initialization: frozen backbone from `backbone.seed`, prior gate
    /// at `γ = 1`, Glorot projections for AAM and decoder from `init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.backbone.embed_dim;
        let params = ModelParams {
            prior_gate: PriorGateParams::init(config.backbone.channels),
            backbone: BackboneParams::synthesize(&config.backbone)?,
            aam: AamParams::init(d, &config.aam, &mut Initializer::fork(config.init_seed, 1))?,
            decoder: DecoderParams::init(
                d,
                &config.decoder,
                WeightInit::Xavier,
                &mut Initializer::fork(config.init_seed, 2),
            )?,
        };
        Ok(Model { config, params })
    }

    /// Whether the named tensor is updated by training under the current toggles.
    pub fn is_trainable(&self, name: &str) -> bool {
        let t = &self.config.toggles;
        (name.starts_with("prior_gate.") && t.sfe_enabled)
            || (name.starts_with("aam.") && t.aam_enabled)
            || name.starts_with("decoder.")
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.params.visit(&mut |name, t| out.push((name, t)));
        out
    }

    /// Frozen backbone tensors, by name.
    pub fn frozen_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.named_tensors()
            .into_iter()
            .filter(|(n, _)| n.starts_with("backbone."))
            .collect()
    }

    /// Records all parameters on `tape`; trainable ones become gradient
    /// leaves when `track` is set.
    pub fn bind(&self, tape: &mut Tape<T>, track: bool) -> Bound {
        let mut trainable = Vec::new();
        let params = self
            .params
            .try_map::<Var, core::convert::Infallible>(&mut |name, t| {
                if track && self.is_trainable(name) {
                    let v = tape.param(t.clone());
                    trainable.push((String::from(name), v));
                    Ok(v)
                } else {
                    Ok(tape.constant(t.clone()))
                }
            })
            .unwrap_or_else(|e| match e {});
        Bound { params, trainable }
    }

    /// Forward pass on `[B, C, H, W]` images. `views` is the number of
    /// consecutive batch entries forming one sample (used only with
    /// `aam.joint_views`).
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, images: Tensor<T>, views: usize) -> Result<Forward> {
        let cfg = &self.config;
        let p = &bound.params;
        let input = tape.constant(images);
        let (x, gate) = if cfg.toggles.sfe_enabled {
            let (x, trace) = prior_gate::prior_forward(tape, input, &p.prior_gate)?;
            (x, Some(trace))
        } else {
            (input, None)
        };
        let tokens = backbone::patchify(tape, x, &p.backbone, &cfg.backbone)?;
        let outputs = backbone::encode(tape, tokens, &p.backbone, &cfg.backbone)?;
        let features = backbone::group_features(tape, &outputs, &cfg.backbone)?;
        let last = *outputs.last().ok_or_else(|| Error::Config("backbone depth is zero".into()))?;
        let f_i = block::standardize(tape, last)?;
        let (f_m, aam_trace) = if cfg.toggles.aam_enabled {
            let (f_m, trace) = self.amplify(tape, f_i, &p.aam, views)?;
            (f_m, Some(trace))
        } else {
            (f_i, None)
        };
        let (f1, f2) = decoder::decode(tape, f_m, &p.decoder, &cfg.decoder)?;
        Ok(Forward {
            input,
            gate,
            features,
            f_i,
            f_m,
            aam: aam_trace,
            f1,
            f2,
        })
    }

    fn amplify(&self, tape: &mut Tape<T>, f_i: Var, p: &AamParams<Var>, views: usize) -> Result<(Var, AamTrace)> {
        let cfg = &self.config.aam;
        if !cfg.joint_views || views <= 1 {
            return aam::aam_forward(tape, f_i, p, cfg);
        }
        let [b, n, d] = match *tape.shape(f_i) {
            [b, n, d] => [b, n, d],
            ref s => return Err(Error::shape("amplify", s, &[0, 0, 0])),
        };
        if b % views != 0 {
            return Err(Error::Config(alloc::format!("batch {b} is not a whole number of {views}-view samples")));
        }
        let joint = tape.reshape(f_i, [b / views, views * n, d])?;
        let (out, trace) = aam::aam_forward(tape, joint, p, cfg)?;
        let out = tape.reshape(out, [b, n, d])?;
        Ok((out, trace))
    }

    /// Training objective for a forward pass under the current toggles.
    pub fn loss(&self, tape: &mut Tape<T>, fwd: &Forward) -> Result<(Var, LossReport)> {
        let FeaturePair { fe1, fe2, .. } = fwd.features;
        if self.config.toggles.cfl_enabled {
            cfl::cross_feature_loss(tape, fe1, fe2, fwd.f1, fwd.f2, &self.config.cfl)
        } else {
            cfl::plain_alignment_loss(tape, fe1, fe2, fwd.f1, fwd.f2, &self.config.cfl)
        }
    }

    /// One optimization step on a batch of normal images.
    pub fn train_step(&mut self, optimizer: &mut StableAdamW<T>, images: Tensor<T>, views: usize) -> Result<TrainStep> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, true);
        let fwd = self.forward(&mut tape, &bound, images, views)?;
        let (loss, report) = self.loss(&mut tape, &fwd)?;
        if !report.loss.is_finite() {
            return Err(Error::NonFinite { op: "loss" });
        }
        let grads = tape.backward(loss)?;
        let mut grad_by_name: BTreeMap<String, Tensor<T>> = bound
            .trainable
            .iter()
            .map(|(name, v)| (name.clone(), grads.get_or_zeros(*v, tape.shape(*v))))
            .collect();
        drop(tape);
        let mut targets: Vec<(String, &mut Tensor<T>)> = Vec::new();
        self.params.visit_mut(&mut |name, t| {
            if grad_by_name.contains_key(&name) {
                targets.push((name, t));
            }
        });
        let grads_ordered: Vec<Tensor<T>> = targets
            .iter()
            .map(|(n, _)| grad_by_name.remove(n).expect("gradient present"))
            .collect();
        let mut updates: Vec<ParamUpdate<'_, T>> = targets
            .iter_mut()
            .zip(&grads_ordered)
            .map(|((name, param), grad)| ParamUpdate { name, param, grad })
            .collect();
        let optimizer_report = optimizer.step(&mut updates)?;
        Ok(TrainStep {
            loss: report,
            optimizer: optimizer_report,
        })
    }

    /// Untracked forward pass returning the four feature tensors as values.
    pub fn features(&self, images: Tensor<T>, views: usize) -> Result<[Tensor<T>; 4]> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let fwd = self.forward(&mut tape, &bound, images, views)?;
        Ok([
            tape.value(fwd.features.fe1).clone(),
            tape.value(fwd.features.fe2).clone(),
            tape.value(fwd.f1).clone(),
            tape.value(fwd.f2).clone(),
        ])
    }

    /// Anomaly map and score for every image of a `[B, C, H, W]` batch.
    pub fn score_images(
        &self,
        images: Tensor<T>,
        views: usize,
        sigma: f64,
        reduction: ScoreReduction,
    ) -> Result<Vec<AnomalyResult<T>>> {
        let size = self.config.backbone.image_size;
        let grid = self.config.backbone.grid();
        let [fe1, fe2, f1, f2] = self.features(images, views)?;
        let b = fe1.shape()[0];
        (0..b)
            .map(|i| {
                scoring::anomaly_map(
                    &fe1.index_axis0(i)?,
                    &fe2.index_axis0(i)?,
                    &f1.index_axis0(i)?,
                    &f2.index_axis0(i)?,
                    grid,
                    (size, size),
                    sigma,
                    reduction,
                )
            })
            .collect()
    }
}
