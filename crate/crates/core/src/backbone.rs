//! Frozen patch-embedding transformer producing the two encoder feature groups.
//!
//! Weights are synthesized from a seed and are never bound as trainable
//! leaves, so no gradient ever reaches them. Gradients still flow *through*
//! the backbone to its input, which is how the prior gate gets trained.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::block::{self, BlockParams, WeightInit};
use crate::error::{Error, Result};
use crate::init::Initializer;
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Standard deviation of the synthesized frozen weights.
pub const FROZEN_WEIGHT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Zero-based block indices averaged into `fe1` and `fe2`.
    pub group_split: [Vec<usize>; 2],
    pub pos_embed: bool,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            group_split: [alloc::vec![0, 1], alloc::vec![2, 3]],
            pos_embed: true,
            seed: 0x5eed_0001,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(alloc::format!(
                "image size {} is not a positive multiple of patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.channels == 0 || self.embed_dim == 0 || self.mlp_ratio == 0 {
            return bad("channels, embed_dim and mlp_ratio must be positive".into());
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(alloc::format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.heads));
        }
        let [g1, g2] = &self.group_split;
        if g1.is_empty() || g2.is_empty() {
            return bad("feature groups must be non-empty".into());
        }
        for g in [g1, g2] {
            if g.windows(2).any(|w| w[0] >= w[1]) {
                return bad("feature group indices must be strictly increasing".into());
            }
            if g.iter().any(|&i| i >= self.depth) {
                return bad(alloc::format!("feature group index beyond depth {}", self.depth));
            }
        }
        if g1.iter().any(|i| g2.contains(i)) {
            return bad("feature groups must be disjoint".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        let side = self.image_size / self.patch_size;
        (side, side)
    }

    pub fn tokens(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams<P> {
    /// `[C·p·p, D]`
    pub patch_w: P,
    /// `[D]`
    pub patch_b: P,
    /// `[N, D]`, absent when positional embedding is disabled.
    pub pos: Option<P>,
    pub blocks: Vec<BlockParams<P>>,
}

impl<P> BackboneParams<P> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        f(alloc::format!("{prefix}.patch_w"), &self.patch_w);
        f(alloc::format!("{prefix}.patch_b"), &self.patch_b);
        if let Some(pos) = &self.pos {
            f(alloc::format!("{prefix}.pos"), pos);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&alloc::format!("{prefix}.blocks.{i}"), f);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        f(alloc::format!("{prefix}.patch_w"), &mut self.patch_w);
        f(alloc::format!("{prefix}.patch_b"), &mut self.patch_b);
        if let Some(pos) = &mut self.pos {
            f(alloc::format!("{prefix}.pos"), pos);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&alloc::format!("{prefix}.blocks.{i}"), f);
        }
    }

    pub fn try_map<Q, E>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Result<Q, E>) -> Result<BackboneParams<Q>, E> {
        Ok(BackboneParams {
            patch_w: f(&alloc::format!("{prefix}.patch_w"), &self.patch_w)?,
            patch_b: f(&alloc::format!("{prefix}.patch_b"), &self.patch_b)?,
            pos: match &self.pos {
                Some(p) => Some(f(&alloc::format!("{prefix}.pos"), p)?),
                None => None,
            },
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.try_map(&alloc::format!("{prefix}.blocks.{i}"), f))
                .collect::<Result<_, E>>()?,
        })
    }
}

impl<T: Real> BackboneParams<Tensor<T>> {
    /// Deterministic Gaussian weights from `cfg.seed`; biases start at zero
    /// as in a freshly initialized ViT.
    pub fn synthesize(cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Initializer::new(cfg.seed);
        let d = cfg.embed_dim;
        let patch_w = rng.normal(&[cfg.patch_dim(), d], FROZEN_WEIGHT_STD);
        let pos = cfg.pos_embed.then(|| rng.normal(&[cfg.tokens(), d], FROZEN_WEIGHT_STD));
        let blocks = (0..cfg.depth)
            .map(|_| BlockParams::synthesize(d, cfg.hidden_dim(), WeightInit::Normal(FROZEN_WEIGHT_STD), &mut rng))
            .collect();
        Ok(BackboneParams {
            patch_w,
            patch_b: Tensor::zeros([d]),
            pos,
            blocks,
        })
    }

    /// Records every weight as an untracked constant.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> BackboneParams<Var> {
        self.try_map::<Var, core::convert::Infallible>("backbone", &mut |_, t| Ok(tape.constant(t.clone())))
            .unwrap_or_else(|e| match e {})
    }
}

/// Both encoder feature groups with their token layout.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePair {
    /// `[B, N, D]`, shallow group
    pub fe1: Var,
    /// `[B, N, D]`, deep group
    pub fe2: Var,
    pub grid: (usize, usize),
}

/// Non-overlapping `p×p` patches in row-major order, flattened channel-major
/// and projected to `D`.
pub fn patchify<T: Real>(tape: &mut Tape<T>, x: Var, p: &BackboneParams<Var>, cfg: &BackboneConfig) -> Result<Var> {
    let (b, c, h, w) = match *tape.shape(x) {
        [b, c, h, w] => (b, c, h, w),
        ref s => return Err(Error::shape("patchify", s, &[0, cfg.channels, cfg.image_size, cfg.image_size])),
    };
    if h != cfg.image_size || w != cfg.image_size || c != cfg.channels {
        return Err(Error::shape(
            "patchify",
            tape.shape(x),
            &[b, cfg.channels, cfg.image_size, cfg.image_size],
        ));
    }
    let ps = cfg.patch_size;
    let (gr, gc) = (h / ps, w / ps);
    let r = tape.reshape(x, [b, c, gr, ps, gc, ps])?;
    let r = tape.permute(r, &[0, 2, 4, 1, 3, 5])?;
    let flat = tape.reshape(r, [b, gr * gc, c * ps * ps])?;
    block::linear(tape, flat, p.patch_w, Some(p.patch_b))
}

/// Adds the positional embedding (when configured) and runs every block.
pub fn encode<T: Real>(tape: &mut Tape<T>, tokens: Var, p: &BackboneParams<Var>, cfg: &BackboneConfig) -> Result<Vec<Var>> {
    let [_, n, d] = block::dims3(tape, tokens, "encode")?;
    if d != cfg.embed_dim {
        return Err(Error::shape("encode", tape.shape(tokens), &[0, n, cfg.embed_dim]));
    }
    let x = match p.pos {
        Some(pos) => tape.add(tokens, pos)?,
        None => tokens,
    };
    block::run_blocks(tape, x, &p.blocks, cfg.heads)
}

/// `fe1`/`fe2` as the mean of their configured block outputs.
pub fn group_features<T: Real>(tape: &mut Tape<T>, outputs: &[Var], cfg: &BackboneConfig) -> Result<FeaturePair> {
    let pick = |group: &[usize]| -> Result<Vec<Var>> {
        group
            .iter()
            .map(|&i| {
                outputs.get(i).copied().ok_or_else(|| {
                    Error::Config(alloc::format!("group index {i} beyond {} block outputs", outputs.len()))
                })
            })
            .collect()
    };
    let g1 = pick(&cfg.group_split[0])?;
    let g2 = pick(&cfg.group_split[1])?;
    Ok(FeaturePair {
        fe1: block::mean_of(tape, &g1)?,
        fe2: block::mean_of(tape, &g2)?,
        grid: cfg.grid(),
    })
}
