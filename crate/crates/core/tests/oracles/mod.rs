//! Brute-force metric oracles, shared with the acceptance run.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn auroc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

pub fn thresholds(scores: &[f64]) -> Vec<f64> {
    let mut t = scores.to_vec();
    t.sort_by(|a, b| b.partial_cmp(a).unwrap());
    t.dedup();
    t
}

pub fn confusion(scores: &[f64], labels: &[bool], t: f64) -> (f64, f64) {
    let tp = scores.iter().zip(labels).filter(|(s, l)| **l && **s >= t).count() as f64;
    let fp = scores.iter().zip(labels).filter(|(s, l)| !**l && **s >= t).count() as f64;
    (tp, fp)
}

pub fn ap_enumerate(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|l| **l).count() as f64;
    let mut prev = 0.0;
    let mut ap = 0.0;
    for t in thresholds(scores) {
        let (tp, fp) = confusion(scores, labels, t);
        let recall = tp / pos;
        ap += (recall - prev) * tp / (tp + fp);
        prev = recall;
    }
    ap
}

pub fn f1_enumerate(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|l| **l).count() as f64;
    thresholds(scores)
        .into_iter()
        .map(|t| {
            let (tp, fp) = confusion(scores, labels, t);
            if tp == 0.0 {
                return 0.0;
            }
            let (p, r) = (tp / (tp + fp), tp / pos);
            2.0 * p * r / (p + r)
        })
        .fold(0.0, f64::max)
}

/// Region labels by repeated min-label propagation over 8 neighbours.
pub fn regions_by_propagation(mask: &[bool], h: usize, w: usize) -> Vec<usize> {
    let mut label: Vec<usize> = (0..h * w).map(|i| if mask[i] { i + 1 } else { 0 }).collect();
    loop {
        let mut changed = false;
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                if label[i] == 0 {
                    continue;
                }
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                        if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                            continue;
                        }
                        let j = nr as usize * w + nc as usize;
                        if label[j] != 0 && label[j] < label[i] {
                            label[i] = label[j];
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            return label;
        }
    }
}

pub fn aupro_enumerate(maps: &[Vec<f64>], masks: &[Vec<bool>], h: usize, w: usize, limit: f64) -> f64 {
    let mut regions: Vec<Vec<(usize, usize)>> = Vec::new();
    for (m, mask) in masks.iter().enumerate() {
        let labels = regions_by_propagation(mask, h, w);
        let mut ids: Vec<usize> = labels.iter().copied().filter(|&l| l != 0).collect();
        ids.sort();
        ids.dedup();
        for id in ids {
            regions.push((0..h * w).filter(|&i| labels[i] == id).map(|i| (m, i)).collect());
        }
    }
    let negatives: Vec<(usize, usize)> =
        (0..maps.len()).flat_map(|m| (0..h * w).filter(move |&i| !masks[m][i]).map(move |i| (m, i))).collect();
    let all: Vec<f64> = maps.iter().flatten().copied().collect();
    let mut curve = vec![(0.0, 0.0)];
    for t in thresholds(&all) {
        let fpr = negatives.iter().filter(|&&(m, i)| maps[m][i] >= t).count() as f64 / negatives.len() as f64;
        let pro = regions
            .iter()
            .map(|reg| reg.iter().filter(|&&(m, i)| maps[m][i] >= t).count() as f64 / reg.len() as f64)
            .sum::<f64>()
            / regions.len() as f64;
        curve.push((fpr, pro));
    }
    let mut area = 0.0;
    for k in 1..curve.len() {
        let ((x0, y0), (x1, y1)) = (curve[k - 1], curve[k]);
        let x1c = x1.min(limit);
        if x1c <= x0 {
            continue;
        }
        let y1c = if x1 > limit { y0 + (y1 - y0) * (limit - x0) / (x1 - x0) } else { y1 };
        area += (x1c - x0) * (y0 + y1c) / 2.0;
    }
    area / limit
}

pub fn random_instance(r: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<bool>) {
    // coarse levels produce plenty of ties
    let levels = r.random_range(2..20u32);
    let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
    labels[0] = true;
    labels[n - 1] = false;
    let scores = (0..n).map(|_| r.random_range(0..levels) as f64 / levels as f64).collect();
    (scores, labels)
}
