//! Central finite differences, used to verify the tape's analytic gradients.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::aam;
use crate::cfl;
use crate::decoder;
use crate::error::{Error, Result};
use crate::init::Initializer;
use crate::model::{Model, ModelConfig};
use crate::prior_gate::{self, PriorGateParams};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Magnitude below which gradient entries are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Central-difference estimate of `∂f/∂x` at every coordinate.
pub fn finite_diff_grad<T: Real>(
    f: impl FnMut(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    step: T,
) -> Result<Tensor<T>> {
    let coords: Vec<usize> = (0..x.numel()).collect();
    let values = finite_diff_at(f, x, step, &coords)?;
    Tensor::new(x.shape().to_vec(), values)
}

/// Central-difference estimate at the listed flat coordinates only.
pub fn finite_diff_at<T: Real>(
    mut f: impl FnMut(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    step: T,
    coords: &[usize],
) -> Result<Vec<T>> {
    if step <= T::zero() {
        return Err(Error::domain("finite_diff_grad", "step must be positive"));
    }
    let mut probe = x.clone();
    let two = T::from_f64(2.0);
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((up - down) / (two * step));
    }
    Ok(out)
}

/// `|a − b| / max(|a|, |b|, RELATIVE_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// Largest [`relative_error`] over paired entries.
pub fn max_relative_error<T: Real>(analytic: &[T], numeric: &[T]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(a.as_f64(), n.as_f64()))
        .fold(0.0, f64::max)
}

/// Largest acceptable relative error of a module check.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Module {
    PriorGate,
    Aam,
    Decoder,
    Cfl,
}

impl Module {
    pub const ALL: [Module; 4] = [Module::PriorGate, Module::Aam, Module::Decoder, Module::Cfl];

    pub fn name(self) -> &'static str {
        match self {
            Module::PriorGate => "prior-gate",
            Module::Aam => "aam",
            Module::Decoder => "decoder",
            Module::Cfl => "cfl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModuleCheck {
    pub module: Module,
    pub outcome: Outcome,
    pub max_rel_error: Option<f64>,
    /// Number of coordinates compared.
    pub coordinates: usize,
    /// Input holding the largest error.
    pub worst_input: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOptions {
    pub seed: u64,
    pub batch: usize,
    /// Coordinates compared per input tensor (all of them when smaller).
    pub samples_per_tensor: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Test hook: scales the analytic gradient of this module by 1.01.
    pub corrupt: Option<Module>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            seed: 0,
            batch: 2,
            samples_per_tensor: 8,
            step: 1e-4,
            tolerance: TOLERANCE,
            corrupt: None,
        }
    }
}

type Eval<'a> = Box<dyn Fn(&mut Tape<f64>, &BTreeMap<String, Var>) -> Result<Var> + 'a>;

/// A scalar function of named tensors.
struct Probe<'a> {
    inputs: Vec<(String, Tensor<f64>)>,
    eval: Eval<'a>,
}

impl Probe<'_> {
    fn value(&self, replace: Option<(usize, &Tensor<f64>)>) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self
            .inputs
            .iter()
            .enumerate()
            .map(|(i, (n, t))| {
                let t = match replace {
                    Some((j, r)) if j == i => r.clone(),
                    _ => t.clone(),
                };
                (n.clone(), tape.constant(t))
            })
            .collect();
        let out = (self.eval)(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    }

    fn analytic(&self) -> Result<Vec<Tensor<f64>>> {
        let mut tape = Tape::new();
        let mut order = Vec::new();
        let vars = self
            .inputs
            .iter()
            .map(|(n, t)| {
                let v = tape.param(t.clone());
                order.push(v);
                (n.clone(), v)
            })
            .collect();
        let out = (self.eval)(&mut tape, &vars)?;
        let grads = tape.backward(out)?;
        Ok(order
            .iter()
            .zip(&self.inputs)
            .map(|(&v, (_, t))| grads.get_or_zeros(v, t.shape()))
            .collect())
    }
}

fn lookup(vars: &BTreeMap<String, Var>, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::Config(alloc::format!("gradcheck input {name} missing")))
}

/// Gaussian readout weights scaled by `1/√numel`, keeping the probed scalar
/// O(1) so finite-difference roundoff stays far below the tolerance.
fn readout_weights(init: &mut Initializer, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    init.normal(shape, 1.0 / libm::sqrt(n.max(1) as f64))
}

/// `Σ r ⊙ x` with a fixed random readout `r`, turning a tensor output into a
/// scalar with a generic gradient.
fn readout(tape: &mut Tape<f64>, x: Var, r: &Tensor<f64>) -> Result<Var> {
    let r = tape.constant(r.clone());
    let p = tape.mul(x, r)?;
    tape.sum_all(p)
}

fn check(module: Module, probe: &Probe<'_>, opts: &CheckOptions) -> Result<ModuleCheck> {
    let mut analytic = probe.analytic()?;
    if opts.corrupt == Some(module) {
        for g in &mut analytic {
            *g = g.map(|v| v * 1.01);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9c4e_c4ec);
    rng.set_stream(module as u64);
    let mut worst = (0.0f64, None);
    let mut coordinates = 0;
    for (i, ((name, x), g)) in probe.inputs.iter().zip(&analytic).enumerate() {
        let n = x.numel();
        let coords: Vec<usize> = if n <= opts.samples_per_tensor {
            (0..n).collect()
        } else {
            (0..opts.samples_per_tensor).map(|_| rng.random_range(0..n)).collect()
        };
        let numeric = finite_diff_at(|t| probe.value(Some((i, t))), x, opts.step, &coords)?;
        let picked: Vec<f64> = coords.iter().map(|&c| g.data()[c]).collect();
        let err = max_relative_error(&picked, &numeric);
        coordinates += coords.len();
        if err > worst.0 || worst.1.is_none() {
            worst = (err, Some(name.clone()));
        }
    }
    let outcome = if worst.0 <= opts.tolerance { Outcome::Pass } else { Outcome::Fail };
    Ok(ModuleCheck {
        module,
        outcome,
        max_rel_error: Some(worst.0),
        coordinates,
        worst_input: worst.1,
    })
}

fn skipped(module: Module) -> ModuleCheck {
    ModuleCheck {
        module,
        outcome: Outcome::Skipped,
        max_rel_error: None,
        coordinates: 0,
        worst_input: None,
    }
}

fn named<P: Clone>(visit: impl FnOnce(&mut dyn FnMut(String, &P))) -> Vec<(String, P)> {
    let mut out = Vec::new();
    visit(&mut |n, t: &P| out.push((n, t.clone())));
    out
}

/// Finite-difference checks of every trainable module of `config` in 64-bit
/// precision, each through a random linear readout of its output (the loss
/// itself for the cross-feature loss). Modules switched off by the toggles
/// are reported as skipped.
pub fn check_modules(config: &ModelConfig, opts: &CheckOptions) -> Result<Vec<ModuleCheck>> {
    config.validate()?;
    let model = Model::<f64>::new(config.clone())?;
    let bb = &config.backbone;
    let (b, n, d) = (opts.batch.max(1), bb.tokens(), bb.embed_dim);
    let mut init = Initializer::fork(opts.seed, 0x6c);
    let mut out = Vec::new();

    // prior gate, on an image-like input and a non-uniform gamma
    if config.toggles.sfe_enabled {
        let shape = [b, bb.channels, bb.image_size, bb.image_size];
        let x = init.normal::<f64>(&shape, 0.2).map(|v| v + 0.5);
        let gamma = init.normal::<f64>(&[bb.channels], 0.3).map(|v| v + 1.0);
        let r = readout_weights(&mut init, &shape);
        let probe = Probe {
            inputs: alloc::vec![("input".into(), x), ("prior_gate.gamma".into(), gamma)],
            eval: Box::new(move |tape, vars| {
                let params = PriorGateParams { gamma: lookup(vars, "prior_gate.gamma")? };
                let (y, _) = prior_gate::prior_forward(tape, lookup(vars, "input")?, &params)?;
                readout(tape, y, &r)
            }),
        };
        out.push(check(Module::PriorGate, &probe, opts)?);
    } else {
        out.push(skipped(Module::PriorGate));
    }

    if config.toggles.aam_enabled {
        let mut inputs = alloc::vec![(String::from("input"), init.normal::<f64>(&[b, n, d], 1.0))];
        inputs.extend(named(|f| model.params.aam.visit("aam", f)));
        let r = readout_weights(&mut init, &[b, n, d]);
        let cfg = config.aam.clone();
        let template = model.params.aam.clone();
        let probe = Probe {
            inputs,
            eval: Box::new(move |tape, vars| {
                let params = template.try_map("aam", &mut |name, _| lookup(vars, name))?;
                let (y, _) = aam::aam_forward(tape, lookup(vars, "input")?, &params, &cfg)?;
                readout(tape, y, &r)
            }),
        };
        out.push(check(Module::Aam, &probe, opts)?);
    } else {
        out.push(skipped(Module::Aam));
    }

    {
        let mut inputs = alloc::vec![(String::from("input"), init.normal::<f64>(&[b, n, d], 1.0))];
        inputs.extend(named(|f| model.params.decoder.visit("decoder", f)));
        let r1 = readout_weights(&mut init, &[b, n, d]);
        let r2 = readout_weights(&mut init, &[b, n, d]);
        let cfg = config.decoder.clone();
        let template = model.params.decoder.clone();
        let probe = Probe {
            inputs,
            eval: Box::new(move |tape, vars| {
                let params = template.try_map("decoder", &mut |name, _| lookup(vars, name))?;
                let (f1, f2) = decoder::decode(tape, lookup(vars, "input")?, &params, &cfg)?;
                let a = readout(tape, f1, &r1)?;
                let c = readout(tape, f2, &r2)?;
                tape.add(a, c)
            }),
        };
        out.push(check(Module::Decoder, &probe, opts)?);
    }

    if config.toggles.cfl_enabled {
        let [fe1, fe2, f1, f2] = core::array::from_fn(|_| init.normal::<f64>(&[b, n, d], 1.0));
        let cfg = config.cfl.clone();
        // detached targets carry no gradient, so they are fixed rather than probed
        let (inputs, fixed) = if cfg.detach_targets {
            (alloc::vec![("f1".into(), f1), ("f2".into(), f2)], Some((fe1, fe2)))
        } else {
            (
                alloc::vec![("fe1".into(), fe1), ("fe2".into(), fe2), ("f1".into(), f1), ("f2".into(), f2)],
                None,
            )
        };
        let probe = Probe {
            inputs,
            eval: Box::new(move |tape, vars| {
                let (fe1, fe2) = match &fixed {
                    Some((a, c)) => (tape.constant(a.clone()), tape.constant(c.clone())),
                    None => (lookup(vars, "fe1")?, lookup(vars, "fe2")?),
                };
                let (f1, f2) = (lookup(vars, "f1")?, lookup(vars, "f2")?);
                Ok(cfl::cross_feature_loss(tape, fe1, fe2, f1, f2, &cfg)?.0)
            }),
        };
        out.push(check(Module::Cfl, &probe, opts)?);
    } else {
        out.push(skipped(Module::Cfl));
    }
    Ok(out)
}
