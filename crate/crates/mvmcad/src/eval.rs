//! Test-set scoring and the metric report.

use std::path::Path;

use mvmcad_core::metrics::{self, ImageMetrics, MetricCounts, MetricReport, PixelMetrics, DEFAULT_FPR_LIMIT};
use mvmcad_core::model::Model;
use mvmcad_core::scoring::AnomalyResult;
use mvmcad_core::{Real, Tensor};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ScoringConfig;
use crate::dataset::{self, MultiViewSample};
use crate::error::{Error, IoContext, Result};

/// Views per forward pass. Fixed so results never depend on thread count.
pub const EVAL_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViewScore {
    pub category: String,
    pub sample_id: String,
    pub view: usize,
    pub score: f64,
    pub anomalous: bool,
}

#[derive(Debug, Clone)]
pub struct Evaluation<T> {
    pub report: MetricReport,
    pub views: Vec<ViewScore>,
    pub maps: Vec<AnomalyResult<T>>,
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Validation(format!("thread pool: {e}")))
}

/// Scores every view of `samples`. Chunks are fixed-size (or one sample each
/// with joint views) and merged in index order.
pub fn score_samples<T: Real>(
    model: &Model<T>,
    scoring: &ScoringConfig,
    samples: &[MultiViewSample],
    jobs: usize,
) -> Result<Vec<AnomalyResult<T>>> {
    let size = model.config.backbone.image_size;
    dataset::check_size(samples, size)?;
    let sigma = scoring.sigma_for(size);
    let joint = model.config.aam.joint_views && model.config.toggles.aam_enabled;
    let chunks: Vec<(Vec<Tensor<T>>, usize)> = if joint {
        samples
            .iter()
            .map(|s| (s.views.iter().map(|v| v.tensor()).collect(), s.views.len()))
            .collect()
    } else {
        let all: Vec<Tensor<T>> = samples.iter().flat_map(|s| s.views.iter().map(|v| v.tensor())).collect();
        all.chunks(EVAL_CHUNK).map(|c| (c.to_vec(), 1)).collect()
    };
    let run = || {
        chunks
            .par_iter()
            .map(|(imgs, views)| model.score_images(Tensor::stack(imgs)?, *views, sigma, scoring.reduction))
            .collect::<mvmcad_core::Result<Vec<_>>>()
    };
    let results = if jobs == 0 { run() } else { pool(jobs)?.install(run) }?;
    Ok(results.into_iter().flatten().collect())
}

/// Image and pixel metrics over per-view maps.
pub fn report<T: Real>(samples: &[MultiViewSample], maps: &[AnomalyResult<T>]) -> Result<(MetricReport, Vec<ViewScore>)> {
    let views: Vec<ViewScore> = samples
        .iter()
        .flat_map(|s| {
            s.views.iter().map(move |v| (s, v))
        })
        .zip(maps)
        .map(|((s, v), r)| ViewScore {
            category: s.category.clone(),
            sample_id: s.sample_id.clone(),
            view: v.view,
            score: r.score.as_f64(),
            anomalous: v.anomalous(),
        })
        .collect();
    if views.len() != maps.len() {
        return Err(Error::Validation("map count does not match view count".into()));
    }
    let scores: Vec<f64> = views.iter().map(|v| v.score).collect();
    let labels: Vec<bool> = views.iter().map(|v| v.anomalous).collect();
    let image = image_metrics(&scores, &labels)?;

    let masks: Vec<Tensor<T>> = samples.iter().flat_map(|s| s.views.iter().map(|v| v.mask_tensor())).collect();
    let mut px_scores = Vec::new();
    let mut px_labels = Vec::new();
    for (r, m) in maps.iter().zip(&masks) {
        px_scores.extend(r.map.data().iter().map(|v| v.as_f64()));
        px_labels.extend(m.data().iter().map(|&v| v > T::zero()));
    }
    let map_tensors: Vec<Tensor<T>> = maps.iter().map(|r| r.map.clone()).collect();
    let pixel = PixelMetrics {
        auroc: metrics::auroc(&px_scores, &px_labels)?,
        ap: metrics::average_precision(&px_scores, &px_labels)?,
        f1_max: metrics::f1_max(&px_scores, &px_labels)?,
        aupro: metrics::aupro(&map_tensors, &masks, DEFAULT_FPR_LIMIT)?,
    };

    let mut sample_scores = Vec::new();
    let mut sample_labels = Vec::new();
    let mut offset = 0;
    for s in samples {
        let n = s.views.len();
        let best = scores[offset..offset + n].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        sample_scores.push(best);
        sample_labels.push(s.anomalous());
        offset += n;
    }
    let sample_level = image_metrics(&sample_scores, &sample_labels).ok();

    let pos = px_labels.iter().filter(|&&l| l).count();
    let image_pos = labels.iter().filter(|&&l| l).count();
    Ok((
        MetricReport {
            image,
            pixel,
            counts: MetricCounts {
                image_positives: image_pos,
                image_negatives: labels.len() - image_pos,
                pixel_positives: pos,
                pixel_negatives: px_labels.len() - pos,
            },
            sample_level,
        },
        views,
    ))
}

fn image_metrics(scores: &[f64], labels: &[bool]) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        auroc: metrics::auroc(scores, labels)?,
        ap: metrics::average_precision(scores, labels)?,
        f1_max: metrics::f1_max(scores, labels)?,
    })
}

pub fn evaluate<T: Real>(
    model: &Model<T>,
    scoring: &ScoringConfig,
    samples: &[MultiViewSample],
    jobs: usize,
) -> Result<Evaluation<T>> {
    let maps = score_samples(model, scoring, samples, jobs)?;
    let (report, views) = report(samples, &maps)?;
    Ok(Evaluation { report, views, maps })
}

pub fn write_report(path: &Path, report: &MetricReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(path, text + "\n").at(path)
}
