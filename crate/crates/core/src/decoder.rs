//! Reconstruction decoder: a stack of trainable pre-norm blocks whose first
//! and second halves are averaged into `f1` and `f2`.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::block::{self, BlockParams, WeightInit};
use crate::error::{Error, Result};
use crate::init::Initializer;
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Even, at least 2.
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.depth < 2 || !self.depth.is_multiple_of(2) {
            return Err(Error::Config(alloc::format!("decoder depth {} must be even and >= 2", self.depth)));
        }
        if self.heads == 0 || !dim.is_multiple_of(self.heads) || self.mlp_ratio == 0 {
            return Err(Error::Config(alloc::format!(
                "decoder heads {} / mlp ratio {} incompatible with dimension {dim}",
                self.heads, self.mlp_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams<P> {
    pub blocks: Vec<BlockParams<P>>,
}

impl<P> DecoderParams<P> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&alloc::format!("{prefix}.blocks.{i}"), f);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&alloc::format!("{prefix}.blocks.{i}"), f);
        }
    }

    pub fn try_map<Q, E>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Result<Q, E>) -> Result<DecoderParams<Q>, E> {
        Ok(DecoderParams {
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.try_map(&alloc::format!("{prefix}.blocks.{i}"), f))
                .collect::<Result<_, E>>()?,
        })
    }
}

impl<T: Real> DecoderParams<Tensor<T>> {
    pub fn init(dim: usize, cfg: &DecoderConfig, weights: WeightInit, rng: &mut Initializer) -> Result<Self> {
        cfg.validate(dim)?;
        Ok(DecoderParams {
            blocks: (0..cfg.depth)
                .map(|_| BlockParams::synthesize(dim, dim * cfg.mlp_ratio, weights, rng))
                .collect(),
        })
    }
}

/// Runs the blocks on `f_m` and returns `(f1, f2)`.
pub fn decode<T: Real>(tape: &mut Tape<T>, f_m: Var, params: &DecoderParams<Var>, cfg: &DecoderConfig) -> Result<(Var, Var)> {
    if params.blocks.len() != cfg.depth {
        return Err(Error::Config(alloc::format!(
            "decoder has {} blocks, config says {}",
            params.blocks.len(),
            cfg.depth
        )));
    }
    cfg.validate(*tape.shape(f_m).last().unwrap_or(&0))?;
    let outputs = block::run_blocks(tape, f_m, &params.blocks, cfg.heads)?;
    let half = outputs.len() / 2;
    let f1 = block::mean_of(tape, &outputs[..half])?;
    let f2 = block::mean_of(tape, &outputs[half..])?;
    Ok((f1, f2))
}
