#![allow(dead_code)]

use mvmcad_core::gradcheck::{finite_diff_grad, max_relative_error};
use mvmcad_core::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

pub fn assert_all_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len(), "length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y} (tol {tol})");
    }
}

/// Max relative error between the tape gradient of `Σ r ⊙ op(x)` and central
/// differences with step 1e-5, for a fixed random readout `r`.
pub fn fd_error(
    x: &Tensor<f64>,
    seed: u64,
    op: &dyn Fn(&mut Tape<f64>, Var) -> Result<Var>,
) -> f64 {
    let out_shape = {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = op(&mut tape, v).unwrap();
        tape.shape(y).to_vec()
    };
    let mut r = rng(seed ^ 0xfeed);
    let readout = uniform(&mut r, &out_shape, -1.0, 1.0);
    let scalar = |tape: &mut Tape<f64>, v: Var| -> Result<Var> {
        let y = op(tape, v)?;
        let w = tape.constant(readout.clone());
        let p = tape.mul(y, w)?;
        tape.sum_all(p)
    };
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let loss = scalar(&mut tape, v).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic = grads.get_or_zeros(v, x.shape());
    let numeric = finite_diff_grad(
        |t| {
            let mut tape = Tape::new();
            let v = tape.constant(t.clone());
            let l = scalar(&mut tape, v)?;
            Ok(tape.value(l).item())
        },
        x,
        1e-5,
    )
    .unwrap();
    max_relative_error(analytic.data(), numeric.data())
}

pub type Rows = Vec<Vec<f64>>;

pub fn rows_of(t: &Tensor<f64>) -> Rows {
    let d = *t.shape().last().unwrap();
    t.data().chunks(d).map(|c| c.to_vec()).collect()
}

pub fn affine(x: &Rows, w: &Tensor<f64>, b: &Tensor<f64>) -> Rows {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| (0..dout).map(|o| b.data()[o] + (0..din).map(|i| row[i] * w.at(&[i, o])).sum::<f64>()).collect())
        .collect()
}

fn layer_norm_rows(x: &Rows, g: &Tensor<f64>, b: &Tensor<f64>) -> Rows {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            let s = (var + mvmcad_core::block::LAYER_NORM_EPS).sqrt();
            row.iter().enumerate().map(|(i, v)| (v - mu) / s * g.data()[i] + b.data()[i]).collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
}

/// One pre-norm transformer block on the tokens of a single image.
pub fn reference_block(x: &Rows, p: &mvmcad_core::block::BlockParams<Tensor<f64>>, heads: usize) -> Rows {
    let (n, d) = (x.len(), x[0].len());
    let dk = d / heads;
    let h = layer_norm_rows(x, &p.ln1_g, &p.ln1_b);
    let (q, k, v) = (affine(&h, &p.wq, &p.bq), affine(&h, &p.wk, &p.bk), affine(&h, &p.wv, &p.bv));
    let mut ctx = vec![vec![0.0; d]; n];
    for head in 0..heads {
        let cols = head * dk..(head + 1) * dk;
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            for j in 0..n {
                for c in cols.clone() {
                    ctx[i][c] += e[j] / s * v[j][c];
                }
            }
        }
    }
    let a = affine(&ctx, &p.wo, &p.bo);
    let x1: Rows = x.iter().zip(&a).map(|(r, s)| r.iter().zip(s).map(|(u, w)| u + w).collect()).collect();
    let h2 = layer_norm_rows(&x1, &p.ln2_g, &p.ln2_b);
    let hidden: Rows = affine(&h2, &p.w1, &p.b1).into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
    let m = affine(&hidden, &p.w2, &p.b2);
    x1.iter().zip(&m).map(|(r, s)| r.iter().zip(s).map(|(u, w)| u + w).collect()).collect()
}

/// Randomizes every field of a block, including gains and biases.
pub fn random_block(rng: &mut ChaCha8Rng, d: usize, hidden: usize) -> mvmcad_core::block::BlockParams<Tensor<f64>> {
    let mut p = mvmcad_core::block::BlockParams::synthesize(
        d,
        hidden,
        mvmcad_core::block::WeightInit::Zero,
        &mut mvmcad_core::init::Initializer::new(0),
    );
    p.visit_mut("b", &mut |name, t| {
        let scale = if name.contains("ln") { 0.3 } else { 0.4 };
        let base = if name.ends_with("_g") { 1.0 } else { 0.0 };
        *t = Tensor::from_fn(t.shape().to_vec(), |_| base + rng.random_range(-scale..scale));
    });
    p
}
