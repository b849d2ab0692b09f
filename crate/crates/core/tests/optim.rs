mod common;

use common::*;
use mvmcad_core::optim::{OptimizerConfig, ParamUpdate, StableAdamW};
use mvmcad_core::{Error, Tensor};

/// Straightforward per-tensor reference of the update rule.
struct Reference {
    cfg: OptimizerConfig,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
    v_max: Vec<f64>,
}

impl Reference {
    fn new(cfg: OptimizerConfig, n: usize) -> Self {
        Reference { cfg, t: 0, m: vec![0.0; n], v: vec![0.0; n], v_max: vec![0.0; n] }
    }

    fn step(&mut self, p: &mut [f64], g: &[f64]) -> f64 {
        let c = &self.cfg;
        self.t += 1;
        let mut u = vec![0.0; p.len()];
        for i in 0..p.len() {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let m_hat = self.m[i] / (1.0 - c.beta1.powi(self.t));
            let v_hat = self.v[i] / (1.0 - c.beta2.powi(self.t));
            self.v_max[i] = self.v_max[i].max(v_hat);
            u[i] = m_hat / (self.v_max[i].sqrt() + c.eps);
        }
        let rms = (u.iter().map(|x| x * x).sum::<f64>() / u.len() as f64).sqrt();
        let lr = c.lr / (rms / c.clip_rms).max(1.0);
        for i in 0..p.len() {
            p[i] = p[i] * (1.0 - lr * c.weight_decay) - lr * u[i];
        }
        lr
    }
}

#[test]
fn defaults_follow_published_hyperparameters() {
    let c = OptimizerConfig::default();
    assert_eq!((c.lr, c.beta1, c.beta2, c.weight_decay), (2e-3, 0.9, 0.999, 1e-4));
    assert_eq!((c.clip_rms, c.eps), (1.0, 1e-8));
}

#[test]
fn matches_reference_over_many_steps() {
    let mut r = rng(1);
    for clip in [1.0, 0.3] {
        let cfg = OptimizerConfig { clip_rms: clip, lr: 0.05, weight_decay: 0.01, ..OptimizerConfig::default() };
        let mut opt = StableAdamW::<f64>::new(cfg.clone()).unwrap();
        let mut a = uniform(&mut r, &[3, 4], -1.0, 1.0);
        let mut b = uniform(&mut r, &[5], -1.0, 1.0);
        let mut ref_a = Reference::new(cfg.clone(), 12);
        let mut ref_b = Reference::new(cfg.clone(), 5);
        let (mut pa, mut pb) = (a.data().to_vec(), b.data().to_vec());
        for step in 0..50 {
            // shrinking gradients let v̂ fall below its running maximum
            let scale = if step < 10 { 3.0 } else { 0.2 };
            let ga = uniform(&mut r, &[3, 4], -scale, scale);
            let gb = uniform(&mut r, &[5], -scale, scale);
            let report = opt
                .step(&mut [
                    ParamUpdate { name: "a", param: &mut a, grad: &ga },
                    ParamUpdate { name: "b", param: &mut b, grad: &gb },
                ])
                .unwrap();
            let la = ref_a.step(&mut pa, ga.data());
            let lb = ref_b.step(&mut pb, gb.data());
            assert_all_close(a.data(), &pa, 1e-12);
            assert_all_close(b.data(), &pb, 1e-12);
            assert!(close(report.lr_eff, (la + lb) / 2.0, 1e-15));
            let norm = ga.data().iter().chain(gb.data()).map(|x| x * x).sum::<f64>().sqrt();
            assert!(close(report.grad_norm, norm, 1e-12));
        }
        let st = &opt.state["a"];
        assert_all_close(st.v_max.data(), &ref_a.v_max, 1e-12);
        assert!(st.v_max.data().iter().zip(st.v.data()).all(|(mx, v)| mx >= v));
    }
}

#[test]
fn v_max_never_decreases() {
    let mut opt = StableAdamW::<f64>::new(OptimizerConfig::default()).unwrap();
    let mut p = Tensor::scalar(0.0);
    let mut last = 0.0;
    for g in [5.0, 0.1, 0.1, 0.0, 2.0, 0.0] {
        let grad = Tensor::scalar(g);
        opt.step(&mut [ParamUpdate { name: "p", param: &mut p, grad: &grad }]).unwrap();
        let now = opt.state["p"].v_max.item();
        assert!(now >= last);
        last = now;
    }
}

#[test]
fn tensors_not_listed_are_untouched() {
    let mut opt = StableAdamW::<f64>::new(OptimizerConfig::default()).unwrap();
    let frozen = Tensor::<f64>::from_f64([2], &[0.1, 0.2]).unwrap();
    let copy = frozen.clone();
    let mut p = Tensor::scalar(1.0);
    let g = Tensor::scalar(1.0);
    for _ in 0..5 {
        opt.step(&mut [ParamUpdate { name: "p", param: &mut p, grad: &g }]).unwrap();
    }
    assert_eq!(frozen, copy);
    assert_eq!(opt.state.len(), 1);
}

#[test]
fn shape_mismatch_is_rejected() {
    let mut opt = StableAdamW::<f64>::new(OptimizerConfig::default()).unwrap();
    let mut p = Tensor::zeros([3]);
    let g = Tensor::zeros([4]);
    let err = opt.step(&mut [ParamUpdate { name: "p", param: &mut p, grad: &g }]).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
}

#[test]
fn invalid_hyperparameters_are_rejected() {
    for cfg in [
        OptimizerConfig { lr: 0.0, ..Default::default() },
        OptimizerConfig { beta1: 1.0, ..Default::default() },
        OptimizerConfig { clip_rms: -1.0, ..Default::default() },
    ] {
        assert!(matches!(StableAdamW::<f64>::new(cfg), Err(Error::Config(_))));
    }
}

#[test]
fn zero_gradient_only_decays() {
    let cfg = OptimizerConfig::default();
    let mut opt = StableAdamW::<f64>::new(cfg.clone()).unwrap();
    let mut p = Tensor::<f64>::from_f64([3], &[1.0, -2.0, 0.5]).unwrap();
    let g = Tensor::zeros([3]);
    opt.step(&mut [ParamUpdate { name: "p", param: &mut p, grad: &g }]).unwrap();
    let f = 1.0 - cfg.lr * cfg.weight_decay;
    assert_eq!(p.data(), &[1.0 * f, -2.0 * f, 0.5 * f]);
}

#[test]
fn first_step_by_hand() {
    // m̂ = g, v̂ = g², so the raw step is g/(|g|+eps); rms < 1 leaves lr intact
    let cfg = OptimizerConfig::default();
    let mut opt = StableAdamW::<f64>::new(cfg.clone()).unwrap();
    let mut p = Tensor::scalar(0.7);
    let g = Tensor::scalar(-0.25);
    let report = opt.step(&mut [ParamUpdate { name: "p", param: &mut p, grad: &g }]).unwrap();
    let u = -0.25 / (0.25 + 1e-8);
    assert_eq!(report.lr_eff, 2e-3);
    assert!(close(p.item(), 0.7 * (1.0 - 2e-7) - 2e-3 * u, 1e-15));
}

#[test]
fn nan_gradient_aborts_before_any_update() {
    let mut opt = StableAdamW::<f64>::new(OptimizerConfig::default()).unwrap();
    let mut a = Tensor::scalar(1.0);
    let mut b = Tensor::scalar(2.0);
    let ga = Tensor::scalar(0.5);
    let gb = Tensor::scalar(f64::NAN);
    let err = opt
        .step(&mut [
            ParamUpdate { name: "decoder.blocks.0.w1", param: &mut a, grad: &ga },
            ParamUpdate { name: "aam.wq", param: &mut b, grad: &gb },
        ])
        .unwrap_err();
    assert!(err.to_string().contains("aam.wq"), "{err}");
    assert_eq!((a.item(), b.item()), (1.0, 2.0));
    assert!(opt.state.is_empty());
}
