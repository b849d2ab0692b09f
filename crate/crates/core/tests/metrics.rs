mod common;
mod oracles;

use common::*;
use oracles::*;
use mvmcad_core::metrics::{aupro, auroc, average_precision, connected_components, f1_max, DEFAULT_FPR_LIMIT};
use mvmcad_core::Tensor;
use rand::Rng;

// ---- hand values -------------------------------------------------------------

#[test]
fn auroc_hand_cases() {
    assert_eq!(auroc(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false]).unwrap(), 1.0);
    assert_eq!(auroc(&[0.9, 0.2, 0.8, 0.1], &[true, false, false, true]).unwrap(), 0.5);
    assert_eq!(auroc(&[0.4; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
}

#[test]
fn ap_hand_cases() {
    assert_eq!(average_precision(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false]).unwrap(), 1.0);
    assert!(close(average_precision(&[0.9, 0.8, 0.7], &[false, true, true]).unwrap(), 7.0 / 12.0, 1e-15));
    assert_eq!(average_precision(&[0.3], &[true]).unwrap(), 1.0);
}

#[test]
fn f1_hand_cases() {
    assert_eq!(f1_max(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false]).unwrap(), 1.0);
    assert!(close(f1_max(&[0.9, 0.8, 0.3], &[true, false, true]).unwrap(), 0.8, 1e-15));
    assert_eq!(f1_max(&[0.2, 0.5, 0.1], &[true, true, true]).unwrap(), 1.0);
}

#[test]
fn degenerate_labels_are_errors() {
    assert!(auroc(&[0.1, 0.2], &[false, false]).unwrap_err().is_numeric());
    assert!(average_precision(&[0.1, 0.2], &[false, false]).unwrap_err().is_numeric());
    assert!(f1_max(&[0.1, 0.2], &[false, false]).unwrap_err().is_numeric());
    let map = Tensor::<f64>::zeros([4, 4]);
    assert!(aupro(&[map.clone()], &[map], 0.3).unwrap_err().is_numeric());
}

#[test]
fn aupro_perfect_prediction() {
    let mut mask = Tensor::<f64>::zeros([8, 8]);
    for i in [9, 10, 17, 18, 45, 46, 54] {
        mask.data_mut()[i] = 1.0;
    }
    assert!(close(aupro(&[mask.clone()], &[mask], DEFAULT_FPR_LIMIT).unwrap(), 1.0, 1e-12));
}

#[test]
fn aupro_constant_map_follows_the_diagonal() {
    // a constant map gives PRO = FPR, i.e. the diagonal, whose normalized
    // area up to the limit is limit/2
    let mut mask = Tensor::<f64>::zeros([8, 8]);
    mask.data_mut()[20] = 1.0;
    mask.data_mut()[21] = 1.0;
    let map = Tensor::full([8, 8], 0.3);
    let v = aupro(&[map], &[mask], DEFAULT_FPR_LIMIT).unwrap();
    assert!(close(v, DEFAULT_FPR_LIMIT / 2.0, 1e-12), "{v}");
}

#[test]
fn aupro_two_regions_hand_case() {
    // 8x8, a 2x2 region top-left and a 1x3 bar bottom-right
    let mut mask = vec![false; 64];
    for i in [0, 1, 8, 9, 61, 62, 63] {
        mask[i] = true;
    }
    let mut r = rng(1);
    let map: Vec<f64> = (0..64)
        .map(|i| if mask[i] { 0.5 + r.random_range(0.0..0.5) } else { r.random_range(0.0..0.7) })
        .collect();
    let expect = aupro_enumerate(&[map.clone()], &[mask.clone()], 8, 8, 0.3);
    let maps = [Tensor::new([8, 8], map).unwrap()];
    let masks = [Tensor::from_fn([8, 8], |i| if mask[i] { 1.0 } else { 0.0 })];
    assert!(close(aupro(&maps, &masks, 0.3).unwrap(), expect, 1e-9));
    assert_eq!(connected_components(&mask, 8, 8).1, 2);
}

// ---- fast vs brute force on random instances -------------------------------

#[test]
fn image_metrics_match_oracles() {
    let mut r = rng(2);
    for _ in 0..200 {
        let n = r.random_range(2..=64);
        let (s, l) = random_instance(&mut r, n);
        assert!(close(auroc(&s, &l).unwrap(), auroc_pairs(&s, &l), 1e-9));
        assert!(close(average_precision(&s, &l).unwrap(), ap_enumerate(&s, &l), 1e-9));
        assert!(close(f1_max(&s, &l).unwrap(), f1_enumerate(&s, &l), 1e-9));
    }
}

#[test]
fn components_match_propagation_oracle() {
    let mut r = rng(3);
    for _ in 0..200 {
        let (h, w) = (r.random_range(1..10), r.random_range(1..10));
        let mask: Vec<bool> = (0..h * w).map(|_| r.random_bool(0.4)).collect();
        let (labels, count) = connected_components(&mask, h, w);
        let oracle = regions_by_propagation(&mask, h, w);
        let mut ids = oracle.clone();
        ids.retain(|&l| l != 0);
        ids.sort();
        ids.dedup();
        assert_eq!(count, ids.len());
        for i in 0..h * w {
            for j in 0..h * w {
                assert_eq!(labels[i] == labels[j], oracle[i] == oracle[j]);
            }
        }
    }
}

#[test]
fn aupro_matches_oracle() {
    let mut r = rng(4);
    for _ in 0..200 {
        let images = r.random_range(1..=3);
        let (h, w) = (r.random_range(2..7), r.random_range(2..7));
        let mut masks: Vec<Vec<bool>> = (0..images).map(|_| (0..h * w).map(|_| r.random_bool(0.25)).collect()).collect();
        masks[0][0] = true;
        masks[0][h * w - 1] = false;
        let levels = r.random_range(3..30u32);
        let maps: Vec<Vec<f64>> = (0..images)
            .map(|_| (0..h * w).map(|_| r.random_range(0..levels) as f64 / levels as f64).collect())
            .collect();
        let limit = [0.3, 0.05, 1.0][r.random_range(0..3)];
        let expect = aupro_enumerate(&maps, &masks, h, w, limit);
        let tm: Vec<Tensor<f64>> = maps.iter().map(|m| Tensor::new([h, w], m.clone()).unwrap()).collect();
        let tk: Vec<Tensor<f64>> =
            masks.iter().map(|m| Tensor::from_fn([h, w], |i| if m[i] { 1.0 } else { 0.0 })).collect();
        let got = aupro(&tm, &tk, limit).unwrap();
        assert!(close(got, expect, 1e-9), "{got} vs {expect}");
        assert!((0.0..=1.0).contains(&got));
    }
}

// ---- invariances --------------------------------------------------------------

#[test]
fn metrics_are_invariant_to_increasing_transforms() {
    let mut r = rng(5);
    for _ in 0..50 {
        let n = r.random_range(2..=64);
        let (s, l) = random_instance(&mut r, n);
        let s: Vec<f64> = s.iter().map(|v| v - 0.5).collect();
        for f in [|v: f64| 2.0 * v + 1.0, |v: f64| v * v * v] {
            let t: Vec<f64> = s.iter().map(|&v| f(v)).collect();
            assert_eq!(auroc(&s, &l).unwrap(), auroc(&t, &l).unwrap());
            assert_eq!(average_precision(&s, &l).unwrap(), average_precision(&t, &l).unwrap());
            assert_eq!(f1_max(&s, &l).unwrap(), f1_max(&t, &l).unwrap());
        }
        let (h, w) = (4, n.div_ceil(4));
        let map: Vec<f64> = (0..h * w).map(|i| s[i % n]).collect();
        let mask = Tensor::from_fn([h, w], |i| if l[i % n] { 1.0 } else { 0.0 });
        let a = aupro(&[Tensor::new([h, w], map.clone()).unwrap()], &[mask.clone()], 0.3).unwrap();
        let b = aupro(&[Tensor::new([h, w], map.iter().map(|v| v * v * v).collect()).unwrap()], &[mask], 0.3).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn reversed_scores_complement_auroc() {
    let mut r = rng(6);
    for _ in 0..100 {
        let n = r.random_range(2..=64);
        let s: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let (_, l) = random_instance(&mut r, n);
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        assert!(close(auroc(&s, &l).unwrap() + auroc(&neg, &l).unwrap(), 1.0, 1e-12));
    }
}
