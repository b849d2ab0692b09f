//! Training loop: seeded batches of normal views, one optimizer step each,
//! a JSON-lines log and periodic checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use mvmcad_core::model::Model;
use mvmcad_core::optim::StableAdamW;
use mvmcad_core::{Real, Tensor};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::MultiViewSample;
use crate::error::{Error, IoContext, Result};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.mvmc";

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub iter: u64,
    pub loss: f64,
    /// Mining threshold of each loss pair.
    pub h: [f64; 2],
    pub grad_norm: f64,
    pub lr_eff: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogLine>,
    pub checkpoint_path: PathBuf,
}

/// Training images as `[3, H, W]` tensors, grouped by sample.
pub struct TrainSet<T> {
    samples: Vec<Vec<Tensor<T>>>,
    views: Vec<(usize, usize)>,
}

impl<T: Real> TrainSet<T> {
    pub fn new(samples: &[MultiViewSample]) -> Result<Self> {
        if samples.iter().any(|s| s.anomalous()) {
            return Err(Error::Validation("training split contains anomalous views".into()));
        }
        let samples: Vec<Vec<Tensor<T>>> = samples
            .iter()
            .filter(|s| !s.views.is_empty())
            .map(|s| s.views.iter().map(|v| v.tensor()).collect())
            .collect();
        let views = samples
            .iter()
            .enumerate()
            .flat_map(|(i, s)| (0..s.len()).map(move |v| (i, v)))
            .collect::<Vec<_>>();
        if views.is_empty() {
            return Err(Error::Validation("training split is empty".into()));
        }
        Ok(TrainSet { samples, views })
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    /// Batch of step `iteration`, a pure function of `(seed, iteration)`.
    /// With `joint` views, whole samples are drawn so each keeps its views
    /// together; returns the batch and its views-per-sample.
    pub fn batch(&self, seed: u64, iteration: u64, batch_size: usize, joint: bool) -> Result<(Tensor<T>, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xba7c_4000_0000_0000);
        rng.set_stream(iteration);
        let items: Vec<&Tensor<T>> = if joint {
            let per = self.samples[0].len();
            if self.samples.iter().any(|s| s.len() != per) {
                return Err(Error::Validation("joint views need the same view count in every sample".into()));
            }
            let k = (batch_size / per).clamp(1, self.samples.len());
            index::sample(&mut rng, self.samples.len(), k)
                .into_iter()
                .flat_map(|i| self.samples[i].iter())
                .collect()
        } else {
            let k = batch_size.min(self.views.len());
            index::sample(&mut rng, self.views.len(), k)
                .into_iter()
                .map(|i| {
                    let (s, v) = self.views[i];
                    &self.samples[s][v]
                })
                .collect()
        };
        let owned: Vec<Tensor<T>> = items.into_iter().cloned().collect();
        let views = if joint { self.samples[0].len() } else { 1 };
        Ok((Tensor::stack(&owned)?, views))
    }
}

/// Trains from `start` (fresh or resumed) up to `config.train.iterations`,
/// writing the log and checkpoints into `out`.
pub fn train<T: Real>(
    config: &RunConfig,
    mut model: Model<T>,
    mut optim: StableAdamW<T>,
    start: u64,
    data: &TrainSet<T>,
    out: &Path,
) -> Result<TrainSummary> {
    config.validate()?;
    std::fs::create_dir_all(out).at(out)?;
    let log_path = out.join(LOG_FILE);
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let mut log_file = std::io::BufWriter::new(std::fs::File::create(&log_path).at(&log_path)?);
    let tc = &config.train;
    let joint = config.model.aam.joint_views && config.model.toggles.aam_enabled;
    let mut log = Vec::new();
    let mut checkpoint = Checkpoint::capture(config, &model, &optim, start);
    checkpoint.save(&ckpt_path)?;
    for iter in start..tc.iterations {
        let (images, views) = data.batch(tc.seed, iter, tc.batch_size, joint)?;
        let step = model.train_step(&mut optim, images, views).map_err(|e| {
            if e.is_numeric() {
                Error::Numeric(format!("step {iter}: {e}; last checkpoint kept at {}", ckpt_path.display()))
            } else {
                e.into()
            }
        })?;
        let line = LogLine {
            iter,
            loss: step.loss.loss,
            h: step.loss.threshold_h,
            grad_norm: step.optimizer.grad_norm,
            lr_eff: step.optimizer.lr_eff,
        };
        serde_json::to_writer(&mut log_file, &line).expect("log line serializes");
        log_file.write_all(b"\n").at(&log_path)?;
        log.push(line);
        let done = iter + 1;
        if done == tc.iterations || (tc.checkpoint_every > 0 && done % tc.checkpoint_every == 0) {
            checkpoint = Checkpoint::capture(config, &model, &optim, done);
            checkpoint.save(&ckpt_path)?;
            log_file.flush().at(&log_path)?;
        }
    }
    log_file.flush().at(&log_path)?;
    Ok(TrainSummary {
        checkpoint,
        log,
        checkpoint_path: ckpt_path,
    })
}

/// Fresh model and optimizer for `config`.
pub fn initialize<T: Real>(config: &RunConfig) -> Result<(Model<T>, StableAdamW<T>)> {
    config.validate()?;
    Ok((Model::new(config.model.clone())?, StableAdamW::new(config.optimizer.clone())?))
}
