mod common;

use common::*;
use mvmcad_core::cfl::{cosine_distance_map, cross_feature_loss, hard_mining_threshold, plain_alignment_loss, CflConfig};
use mvmcad_core::{Error, Tape, Tensor, Var};
use proptest::prelude::*;

fn neg(t: &Tensor<f64>) -> Tensor<f64> {
    t.map(|v| -v)
}

fn loss_of(fe1: &Tensor<f64>, fe2: &Tensor<f64>, f1: &Tensor<f64>, f2: &Tensor<f64>) -> f64 {
    let mut tape = Tape::new();
    let v: Vec<Var> = [fe1, fe2, f1, f2].iter().map(|t| tape.constant((*t).clone())).collect();
    let (l, report) = cross_feature_loss(&mut tape, v[0], v[1], v[2], v[3], &CflConfig::default()).unwrap();
    assert_eq!(tape.value(l).item(), report.loss);
    report.loss
}

fn direct_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

#[test]
fn distance_map_cases() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::from_f64([1, 3, 2], &[1., 2., 1., 0., 3., -1.]).unwrap());
    let b = tape.constant(Tensor::from_f64([1, 3, 2], &[2., 4., 0., 5., -3., 1.]).unwrap());
    let d = cosine_distance_map(&mut tape, a, b).unwrap();
    assert_eq!(tape.shape(d), &[1, 3]);
    assert_all_close(tape.value(d).data(), &[0.0, 1.0, 2.0], 1e-15);
}

#[test]
fn distance_map_matches_direct_formula() {
    let mut r = rng(1);
    let a = uniform(&mut r, &[2, 6, 5], -1.0, 1.0);
    let b = uniform(&mut r, &[2, 6, 5], -1.0, 1.0);
    let mut tape = Tape::<f64>::new();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let d = cosine_distance_map(&mut tape, av, bv).unwrap();
    let expect: Vec<f64> = a.data().chunks(5).zip(b.data().chunks(5)).map(|(x, y)| direct_distance(x, y)).collect();
    assert_all_close(tape.value(d).data(), &expect, 1e-12);
}

#[test]
fn mining_matches_sort_oracle() {
    let mut r = rng(2);
    for len in [1usize, 7, 10, 25, 64, 640] {
        let scores: Vec<f64> = uniform(&mut r, &[len], 0.0, 2.0).into_data();
        let (h, idx) = hard_mining_threshold(&scores, 0.1).unwrap();
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let k = ((0.1 * len as f64).ceil() as usize).max(1);
        assert_eq!(h, sorted[k - 1]);
        assert_eq!(idx.len(), k, "continuous scores have no ties");
        let expect: Vec<usize> = (0..len).filter(|&i| scores[i] >= h).collect();
        assert_eq!(idx, expect);
    }
}

#[test]
fn twenty_five_scores_keep_three() {
    let scores: Vec<f64> = (0..25).map(|i| ((i * 7) % 25) as f64).collect();
    let (h, idx) = hard_mining_threshold(&scores, 0.1).unwrap();
    assert_eq!(h, 22.0);
    assert_eq!(idx.len(), 3);
}

#[test]
fn perfect_and_opposite_reconstructions() {
    let mut r = rng(3);
    let fe1 = uniform(&mut r, &[2, 8, 4], -1.0, 1.0);
    let fe2 = uniform(&mut r, &[2, 8, 4], -1.0, 1.0);
    assert!(loss_of(&fe1, &fe2, &fe2, &fe1).abs() < 1e-12);
    assert!((loss_of(&fe1, &fe2, &neg(&fe2), &neg(&fe1)) - 2.0).abs() < 1e-12);
}

#[test]
fn hand_composed_top_one() {
    // B=1, N=10: token i of each pair has a known distance; the top one is chosen
    let d = 2;
    let fe1 = Tensor::from_fn([1, 10, d], |i| if i % d == 0 { 1.0 } else { 0.0 });
    let fe2 = fe1.clone();
    let angle = |i: usize, scale: f64| scale * i as f64 / 10.0;
    let rotate = |s: f64| {
        Tensor::from_fn([1, 10, d], move |k| {
            let (tok, c) = (k / d, k % d);
            let a = angle(tok, s);
            if c == 0 { a.cos() } else { a.sin() }
        })
    };
    let f2 = rotate(1.0);
    let f1 = rotate(2.0);
    let s1 = 1.0 - (0.9f64).cos();
    let s2 = 1.0 - (1.8f64).cos();
    assert!((loss_of(&fe1, &fe2, &f1, &f2) - 0.5 * (s1 + s2)).abs() < 1e-12);
}

#[test]
fn pairing_is_crossed() {
    let mut r = rng(4);
    let fe1 = uniform(&mut r, &[1, 10, 4], -1.0, 1.0);
    let fe2 = uniform(&mut r, &[1, 10, 4], -1.0, 1.0);
    let f1 = uniform(&mut r, &[1, 10, 4], -1.0, 1.0);
    let f2 = uniform(&mut r, &[1, 10, 4], -1.0, 1.0);
    let mut tape = Tape::new();
    let v: Vec<Var> = [&fe1, &fe2, &f1, &f2].iter().map(|t| tape.constant((*t).clone())).collect();
    let (_, base) = cross_feature_loss(&mut tape, v[0], v[1], v[2], v[3], &CflConfig::default()).unwrap();
    let f1b = f1.map(|x| x + 0.3);
    let mut tape = Tape::new();
    let v: Vec<Var> = [&fe1, &fe2, &f1b, &f2].iter().map(|t| tape.constant((*t).clone())).collect();
    let (_, moved) = cross_feature_loss(&mut tape, v[0], v[1], v[2], v[3], &CflConfig::default()).unwrap();
    // f1 only enters the fe2 pair
    assert_eq!(base.per_pair[0], moved.per_pair[0]);
    assert_ne!(base.per_pair[1], moved.per_pair[1]);
}

#[test]
fn gradient_is_zero_outside_the_mined_set() {
    let mut r = rng(5);
    let shape = [2, 15, 4];
    let t: Vec<Tensor<f64>> = (0..4).map(|_| uniform(&mut r, &shape, -1.0, 1.0)).collect();
    let mut tape = Tape::new();
    let fe1 = tape.constant(t[0].clone());
    let fe2 = tape.constant(t[1].clone());
    let f1 = tape.param(t[2].clone());
    let f2 = tape.param(t[3].clone());
    let d1 = cosine_distance_map(&mut tape, fe1, f2).unwrap();
    let d2 = cosine_distance_map(&mut tape, fe2, f1).unwrap();
    let (_, sel1) = hard_mining_threshold(tape.value(d1).data(), 0.1).unwrap();
    let (_, sel2) = hard_mining_threshold(tape.value(d2).data(), 0.1).unwrap();
    let (loss, report) = cross_feature_loss(&mut tape, fe1, fe2, f1, f2, &CflConfig::default()).unwrap();
    assert_eq!(sel1.len(), 3);
    assert!((report.selected_fraction[0] - 0.1).abs() < 1e-12);
    let g = tape.backward(loss).unwrap();
    for (var, selected) in [(f2, &sel1), (f1, &sel2)] {
        let grad = g.get(var).unwrap();
        for (tok, row) in grad.data().chunks(4).enumerate() {
            if selected.contains(&tok) {
                assert!(row.iter().any(|&x| x != 0.0));
            } else {
                assert!(row.iter().all(|&x| x == 0.0), "token {tok}");
            }
        }
    }
}

#[test]
fn detached_targets_receive_no_gradient() {
    let mut r = rng(6);
    let t: Vec<Tensor<f64>> = (0..4).map(|_| uniform(&mut r, &[1, 10, 4], -1.0, 1.0)).collect();
    for detach in [false, true] {
        let mut tape = Tape::new();
        let v: Vec<Var> = t.iter().map(|x| tape.param(x.clone())).collect();
        let cfg = CflConfig { detach_targets: detach, ..CflConfig::default() };
        let (loss, _) = cross_feature_loss(&mut tape, v[0], v[1], v[2], v[3], &cfg).unwrap();
        let g = tape.backward(loss).unwrap();
        let reached = g.get(v[0]).is_some_and(|g| g.data().iter().any(|&x| x != 0.0));
        assert_eq!(reached, !detach);
        assert!(g.get(v[2]).is_some());
    }
}

#[test]
fn plain_alignment_is_uncrossed_mean() {
    let mut r = rng(7);
    let t: Vec<Tensor<f64>> = (0..4).map(|_| uniform(&mut r, &[2, 5, 3], -1.0, 1.0)).collect();
    let mut tape = Tape::new();
    let v: Vec<Var> = t.iter().map(|x| tape.constant(x.clone())).collect();
    let (_, report) = plain_alignment_loss(&mut tape, v[0], v[1], v[2], v[3], &CflConfig::default()).unwrap();
    let mean = |a: &Tensor<f64>, b: &Tensor<f64>| {
        a.data().chunks(3).zip(b.data().chunks(3)).map(|(x, y)| direct_distance(x, y)).sum::<f64>() / 10.0
    };
    let expect = 0.5 * (mean(&t[0], &t[2]) + mean(&t[1], &t[3]));
    assert!((report.loss - expect).abs() < 1e-12);
}

#[test]
fn mismatched_shapes_are_rejected() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros([1, 4, 3]));
    let b = tape.constant(Tensor::zeros([1, 5, 3]));
    let err = cross_feature_loss(&mut tape, a, a, a, b, &CflConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_is_bounded(seed in 0u64..100_000, n in 1usize..30) {
        let mut r = rng(seed);
        let t: Vec<Tensor<f64>> = (0..4).map(|_| uniform(&mut r, &[1, n, 3], -1.0, 1.0)).collect();
        let l = loss_of(&t[0], &t[1], &t[2], &t[3]);
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&l));
    }

    #[test]
    fn positive_token_rescaling_is_invisible(seed in 0u64..100_000) {
        let mut r = rng(seed);
        let t: Vec<Tensor<f64>> = (0..4).map(|_| uniform(&mut r, &[2, 10, 4], -1.0, 1.0)).collect();
        let scales = uniform(&mut r, &[20], 0.1, 10.0);
        let scaled = Tensor::from_fn([2, 10, 4], |i| t[3].data()[i] * scales.data()[i / 4]);
        let a = loss_of(&t[0], &t[1], &t[2], &t[3]);
        let b = loss_of(&t[0], &t[1], &t[2], &scaled);
        prop_assert!((a - b).abs() <= 1e-6);
    }
}
