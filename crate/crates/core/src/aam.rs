//! Anomaly amplification module.
//!
//! Global token attention produces a context `F`; tokens whose normalized
//! energy dominates receive most of the soft distribution `Π`, and the
//! output is damped by the `Π`-weighted energy of the context:
//!
//! ```text
//! Q, K, V = f·W^Q, f·W^K, f·W^V                       (head split)
//! F       = W^F( softmax(Q Kᵀ / √d_k) V )
//! F̂       = F / (‖F‖ over tokens + eps)              per (b, h, d)
//! Sim_j   = ‖F̂_j‖² · γ_h
//! Π       = softmax_j(Sim)
//! Att_d   = 1 / (1 + Σ_j Π_j F²_{j,d})
//! f_m     = W^out( −(F ⊙ Π) ⊙ Att )
//! ```

use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::block::{self, dims3, linear, merge_heads, split_heads};
use crate::error::{Error, Result};
use crate::init::Initializer;
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Epsilon of the token-axis normalization.
pub const TOKEN_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AamConfig {
    pub heads: usize,
    /// Bias terms on all five projections.
    pub bias: bool,
    /// Adds the module input to its output.
    pub residual: bool,
    /// Concatenates the views of one sample into a single token set.
    pub joint_views: bool,
    pub temp_init: f64,
}

impl Default for AamConfig {
    fn default() -> Self {
        AamConfig {
            heads: 4,
            bias: false,
            residual: false,
            joint_views: false,
            temp_init: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AamParams<P> {
    pub wq: P,
    pub wk: P,
    pub wv: P,
    pub wf: P,
    pub wout: P,
    /// Per-head temperature, `[h]`.
    pub temp: P,
    pub biases: Option<AamBiases<P>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AamBiases<P> {
    pub bq: P,
    pub bk: P,
    pub bv: P,
    pub bf: P,
    pub bout: P,
}

impl<P> AamParams<P> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        for (name, p) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wf", &self.wf), ("wout", &self.wout), ("temp", &self.temp)] {
            f(alloc::format!("{prefix}.{name}"), p);
        }
        if let Some(b) = &self.biases {
            for (name, p) in [("bq", &b.bq), ("bk", &b.bk), ("bv", &b.bv), ("bf", &b.bf), ("bout", &b.bout)] {
                f(alloc::format!("{prefix}.{name}"), p);
            }
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        for (name, p) in [
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wf", &mut self.wf),
            ("wout", &mut self.wout),
            ("temp", &mut self.temp),
        ] {
            f(alloc::format!("{prefix}.{name}"), p);
        }
        if let Some(b) = &mut self.biases {
            for (name, p) in [("bq", &mut b.bq), ("bk", &mut b.bk), ("bv", &mut b.bv), ("bf", &mut b.bf), ("bout", &mut b.bout)] {
                f(alloc::format!("{prefix}.{name}"), p);
            }
        }
    }

    pub fn try_map<Q, E>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Result<Q, E>) -> Result<AamParams<Q>, E> {
        let mut field = |name: &str, p: &P| f(&alloc::format!("{prefix}.{name}"), p);
        Ok(AamParams {
            wq: field("wq", &self.wq)?,
            wk: field("wk", &self.wk)?,
            wv: field("wv", &self.wv)?,
            wf: field("wf", &self.wf)?,
            wout: field("wout", &self.wout)?,
            temp: field("temp", &self.temp)?,
            biases: match &self.biases {
                Some(b) => Some(AamBiases {
                    bq: field("bq", &b.bq)?,
                    bk: field("bk", &b.bk)?,
                    bv: field("bv", &b.bv)?,
                    bf: field("bf", &b.bf)?,
                    bout: field("bout", &b.bout)?,
                }),
                None => None,
            },
        })
    }
}

impl<T: Real> AamParams<Tensor<T>> {
    /// Glorot projections, temperature `cfg.temp_init`, zero biases.
    pub fn init(dim: usize, cfg: &AamConfig, rng: &mut Initializer) -> Result<Self> {
        if cfg.heads == 0 || !dim.is_multiple_of(cfg.heads) {
            return Err(Error::Config(alloc::format!("dimension {dim} not divisible by {} heads", cfg.heads)));
        }
        if !(cfg.temp_init > 0.0) {
            return Err(Error::Config("temperature must start strictly positive".into()));
        }
        Ok(AamParams {
            wq: rng.xavier(dim, dim),
            wk: rng.xavier(dim, dim),
            wv: rng.xavier(dim, dim),
            wf: rng.xavier(dim, dim),
            wout: rng.xavier(dim, dim),
            temp: Tensor::full([cfg.heads], T::from_f64(cfg.temp_init)),
            biases: cfg.bias.then(|| AamBiases {
                bq: Tensor::zeros([dim]),
                bk: Tensor::zeros([dim]),
                bv: Tensor::zeros([dim]),
                bf: Tensor::zeros([dim]),
                bout: Tensor::zeros([dim]),
            }),
        })
    }
}

/// Intermediate tensors of one module evaluation.
#[derive(Debug, Clone, Copy)]
pub struct AamTrace {
    /// `[B, h, N, d_k]`
    pub f_ctx: Var,
    /// `[B, h, N, d_k]`
    pub f_hat: Var,
    /// `[B, h, N]`
    pub sim: Var,
    /// `[B, h, N]`
    pub pi: Var,
    /// `[B, h, 1, d_k]`
    pub att: Var,
    /// `[B, N, D]`
    pub out: Var,
}

fn heads_of<T: Real>(tape: &Tape<T>, params: &AamParams<Var>) -> usize {
    tape.shape(params.temp)[0]
}

fn dims4(shape: &[usize], op: &'static str) -> Result<[usize; 4]> {
    match *shape {
        [b, h, n, d] => Ok([b, h, n, d]),
        ref s => Err(Error::shape(op, s, &[0, 0, 0, 0])),
    }
}

/// Projects `[B, N, D]` and splits into `[B, h, N, d_k]` queries, keys and values.
pub fn qkv_project<T: Real>(tape: &mut Tape<T>, f_i: Var, params: &AamParams<Var>) -> Result<(Var, Var, Var)> {
    let heads = heads_of(tape, params);
    let [_, _, d] = dims3(tape, f_i, "qkv_project")?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(alloc::format!("dimension {d} not divisible by {heads} heads")));
    }
    let b = params.biases.as_ref();
    let q = linear(tape, f_i, params.wq, b.map(|b| b.bq))?;
    let k = linear(tape, f_i, params.wk, b.map(|b| b.bk))?;
    let v = linear(tape, f_i, params.wv, b.map(|b| b.bv))?;
    Ok((
        split_heads(tape, q, heads)?,
        split_heads(tape, k, heads)?,
        split_heads(tape, v, heads)?,
    ))
}

/// `F = W^F(softmax(QKᵀ/√d_k)·V)`, returned head-split.
pub fn attention_context<T: Real>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, params: &AamParams<Var>) -> Result<Var> {
    let heads = heads_of(tape, params);
    let ctx = block::scaled_dot_attention(tape, q, k, v)?;
    let merged = merge_heads(tape, ctx)?;
    let projected = linear(tape, merged, params.wf, params.biases.as_ref().map(|b| b.bf))?;
    split_heads(tape, projected, heads)
}

/// Normalizes each `(b, h, ·, d)` fiber across the token axis.
pub fn token_normalize<T: Real>(tape: &mut Tape<T>, f_ctx: Var) -> Result<Var> {
    dims4(tape.shape(f_ctx), "token_normalize")?;
    tape.normalize_l2(f_ctx, 2, T::from_f64(TOKEN_NORM_EPS))
}

/// `Sim_{b,h,j} = ‖F̂_{b,h,j,:}‖² · γ_h`.
pub fn similarity_scores<T: Real>(tape: &mut Tape<T>, f_hat: Var, params: &AamParams<Var>) -> Result<Var> {
    let [b, h, n, _] = dims4(tape.shape(f_hat), "similarity_scores")?;
    if tape.shape(params.temp) != [h] {
        return Err(Error::shape("similarity_scores", tape.shape(params.temp), &[h]));
    }
    let sq = tape.square(f_hat)?;
    let energy = tape.sum(sq, 3)?;
    let temp = tape.reshape(params.temp, [h, 1, 1])?;
    let sim = tape.mul(energy, temp)?;
    tape.reshape(sim, [b, h, n])
}

/// `Π = softmax over tokens`.
pub fn soft_distribution<T: Real>(tape: &mut Tape<T>, sim: Var) -> Result<Var> {
    if tape.value(sim).rank() != 3 {
        return Err(Error::shape("soft_distribution", tape.shape(sim), &[0, 0, 0]));
    }
    tape.softmax(sim, 2)
}

/// `Att = 1 / (1 + Σ_j Π_j · F²_j)`, one factor per `(b, h, d)`.
pub fn suppression_factor<T: Real>(tape: &mut Tape<T>, pi: Var, f_ctx: Var) -> Result<Var> {
    let [b, h, n, _] = dims4(tape.shape(f_ctx), "suppression_factor")?;
    if tape.shape(pi) != [b, h, n] {
        return Err(Error::shape("suppression_factor", tape.shape(pi), &[b, h, n]));
    }
    let p = tape.reshape(pi, [b, h, n, 1])?;
    let sq = tape.square(f_ctx)?;
    let weighted = tape.mul(sq, p)?;
    let energy = tape.sum(weighted, 2)?;
    let denom = tape.add_scalar(energy, T::one())?;
    tape.reciprocal(denom)
}

/// `f_m = W^out(−(F ⊙ Π) ⊙ Att)` with heads merged before the projection.
pub fn amplify<T: Real>(tape: &mut Tape<T>, f_ctx: Var, pi: Var, att: Var, params: &AamParams<Var>) -> Result<Var> {
    let [b, h, n, _] = dims4(tape.shape(f_ctx), "amplify")?;
    let p = tape.reshape(pi, [b, h, n, 1])?;
    let weighted = tape.mul(f_ctx, p)?;
    let damped = tape.mul(weighted, att)?;
    let negated = tape.neg(damped)?;
    let merged = merge_heads(tape, negated)?;
    linear(tape, merged, params.wout, params.biases.as_ref().map(|b| b.bout))
}

/// Full module on `[B, N, D]` tokens.
pub fn aam_forward<T: Real>(
    tape: &mut Tape<T>,
    f_i: Var,
    params: &AamParams<Var>,
    cfg: &AamConfig,
) -> Result<(Var, AamTrace)> {
    let (q, k, v) = qkv_project(tape, f_i, params)?;
    let f_ctx = attention_context(tape, q, k, v, params)?;
    let f_hat = token_normalize(tape, f_ctx)?;
    let sim = similarity_scores(tape, f_hat, params)?;
    let pi = soft_distribution(tape, sim)?;
    let att = suppression_factor(tape, pi, f_ctx)?;
    let mut out = amplify(tape, f_ctx, pi, att, params)?;
    if cfg.residual {
        out = tape.add(out, f_i)?;
    }
    Ok((
        out,
        AamTrace {
            f_ctx,
            f_hat,
            sim,
            pi,
            att,
            out,
        },
    ))
}
