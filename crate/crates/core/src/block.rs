//! Pre-norm transformer block shared by the frozen backbone and the decoder.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::init::Initializer;
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Weights of one block: `x + attn(LN(x))` followed by `x + mlp(LN(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<P> {
    pub ln1_g: P,
    pub ln1_b: P,
    pub wq: P,
    pub bq: P,
    pub wk: P,
    pub bk: P,
    pub wv: P,
    pub bv: P,
    pub wo: P,
    pub bo: P,
    pub ln2_g: P,
    pub ln2_b: P,
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
}

macro_rules! block_fields {
    ($mac:ident) => {
        $mac!(ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2)
    };
}

impl<P> BlockParams<P> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        macro_rules! go {
            ($($field:ident),*) => { $( f(alloc::format!("{prefix}.{}", stringify!($field)), &self.$field); )* };
        }
        block_fields!(go);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut P)) {
        macro_rules! go {
            ($($field:ident),*) => { $( f(alloc::format!("{prefix}.{}", stringify!($field)), &mut self.$field); )* };
        }
        block_fields!(go);
    }

    pub fn try_map<Q, E>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Result<Q, E>) -> Result<BlockParams<Q>, E> {
        macro_rules! go {
            ($($field:ident),*) => {
                BlockParams { $( $field: f(&alloc::format!("{prefix}.{}", stringify!($field)), &self.$field)?, )* }
            };
        }
        Ok(block_fields!(go))
    }
}

/// How linear weights are drawn when synthesizing a block.
#[derive(Debug, Clone, Copy)]
pub enum WeightInit {
    /// Gaussian with a fixed standard deviation.
    Normal(f64),
    /// Glorot normal.
    Xavier,
    /// All linear weights zero.
    Zero,
}

impl<T: Real> BlockParams<Tensor<T>> {
    /// Layer-norm gains are 1, every bias is 0.
    pub fn synthesize(dim: usize, hidden: usize, init: WeightInit, rng: &mut Initializer) -> Self {
        let mut weight = |fan_in: usize, fan_out: usize| -> Tensor<T> {
            match init {
                WeightInit::Normal(std) => rng.normal(&[fan_in, fan_out], std),
                WeightInit::Xavier => rng.xavier(fan_in, fan_out),
                WeightInit::Zero => Tensor::zeros([fan_in, fan_out]),
            }
        };
        BlockParams {
            wq: weight(dim, dim),
            wk: weight(dim, dim),
            wv: weight(dim, dim),
            wo: weight(dim, dim),
            w1: weight(dim, hidden),
            w2: weight(hidden, dim),
            ln1_g: Tensor::ones([dim]),
            ln1_b: Tensor::zeros([dim]),
            ln2_g: Tensor::ones([dim]),
            ln2_b: Tensor::zeros([dim]),
            bq: Tensor::zeros([dim]),
            bk: Tensor::zeros([dim]),
            bv: Tensor::zeros([dim]),
            bo: Tensor::zeros([dim]),
            b1: Tensor::zeros([hidden]),
            b2: Tensor::zeros([dim]),
        }
    }
}

/// `x·W (+ b)` over the last axis.
pub fn linear<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

/// Layer normalization over the last axis.
pub fn layer_norm<T: Real>(tape: &mut Tape<T>, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let normed = standardize(tape, x)?;
    let scaled = tape.mul(normed, gain)?;
    tape.add(scaled, bias)
}

/// Layer normalization without the affine part.
pub fn standardize<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let last = tape.value(x).rank() - 1;
    let mu = tape.mean(x, last)?;
    let centered = tape.sub(x, mu)?;
    let sq = tape.square(centered)?;
    let var = tape.mean(sq, last)?;
    let var = tape.add_scalar(var, T::from_f64(LAYER_NORM_EPS))?;
    let std = tape.sqrt(var)?;
    tape.div(centered, std)
}

/// `[B, N, D] → [B, h, N, D/h]`, heads taking contiguous slices of `D`.
pub fn split_heads<T: Real>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let [b, n, d] = dims3(tape, x, "split_heads")?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(alloc::format!("dimension {d} is not divisible by {heads} heads")));
    }
    let r = tape.reshape(x, [b, n, heads, d / heads])?;
    tape.permute(r, &[0, 2, 1, 3])
}

/// Inverse of [`split_heads`].
pub fn merge_heads<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let (b, h, n, dk) = match *tape.shape(x) {
        [b, h, n, dk] => (b, h, n, dk),
        ref s => return Err(Error::shape("merge_heads", s, &[0, 0, 0, 0])),
    };
    let p = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(p, [b, n, h * dk])
}

pub(crate) fn dims3<T: Real>(tape: &Tape<T>, x: Var, op: &'static str) -> Result<[usize; 3]> {
    match *tape.shape(x) {
        [b, n, d] => Ok([b, n, d]),
        ref s => Err(Error::shape(op, s, &[0, 0, 0])),
    }
}

/// `softmax(Q Kᵀ / √d_k) V` on head-split tensors.
pub fn scaled_dot_attention<T: Real>(tape: &mut Tape<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let dk = *tape.shape(q).last().unwrap_or(&1);
    let kt = tape.transpose_last(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, T::one() / T::from_f64(dk as f64).sqrt())?;
    let last = tape.value(scores).rank() - 1;
    let weights = tape.softmax(scores, last)?;
    tape.matmul(weights, v)
}

/// Multi-head self-attention on `[B, N, D]` with output projection.
pub fn self_attention<T: Real>(tape: &mut Tape<T>, x: Var, p: &BlockParams<Var>, heads: usize) -> Result<Var> {
    let q = linear(tape, x, p.wq, Some(p.bq))?;
    let k = linear(tape, x, p.wk, Some(p.bk))?;
    let v = linear(tape, x, p.wv, Some(p.bv))?;
    let q = split_heads(tape, q, heads)?;
    let k = split_heads(tape, k, heads)?;
    let v = split_heads(tape, v, heads)?;
    let ctx = scaled_dot_attention(tape, q, k, v)?;
    let merged = merge_heads(tape, ctx)?;
    linear(tape, merged, p.wo, Some(p.bo))
}

/// Two-layer GELU MLP.
pub fn mlp<T: Real>(tape: &mut Tape<T>, x: Var, p: &BlockParams<Var>) -> Result<Var> {
    let h = linear(tape, x, p.w1, Some(p.b1))?;
    let h = tape.gelu(h)?;
    linear(tape, h, p.w2, Some(p.b2))
}

pub fn block_forward<T: Real>(tape: &mut Tape<T>, x: Var, p: &BlockParams<Var>, heads: usize) -> Result<Var> {
    let n1 = layer_norm(tape, x, p.ln1_g, p.ln1_b)?;
    let a = self_attention(tape, n1, p, heads)?;
    let x = tape.add(x, a)?;
    let n2 = layer_norm(tape, x, p.ln2_g, p.ln2_b)?;
    let m = mlp(tape, n2, p)?;
    tape.add(x, m)
}

/// Runs blocks in sequence and returns each block's output.
pub fn run_blocks<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    blocks: &[BlockParams<Var>],
    heads: usize,
) -> Result<Vec<Var>> {
    let mut outputs = Vec::with_capacity(blocks.len());
    let mut h = x;
    for p in blocks {
        h = block_forward(tape, h, p, heads)?;
        outputs.push(h);
    }
    Ok(outputs)
}

/// Elementwise mean of equally shaped tensors.
pub fn mean_of<T: Real>(tape: &mut Tape<T>, xs: &[Var]) -> Result<Var> {
    let (&first, rest) = xs
        .split_first()
        .ok_or_else(|| Error::Contract("mean of an empty group".into()))?;
    if rest.is_empty() {
        return Ok(first);
    }
    let mut acc = first;
    for &x in rest {
        acc = tape.add(acc, x)?;
    }
    tape.scale(acc, T::one() / T::from_f64(xs.len() as f64))
}
