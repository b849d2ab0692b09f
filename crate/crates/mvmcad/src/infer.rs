//! Single-image inference: a 16-bit heatmap with its scale sidecar and a
//! score record.

use std::path::{Path, PathBuf};

use mvmcad_core::model::Model;
use mvmcad_core::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset;
use crate::error::{Error, IoContext, Result};
use crate::netpbm::{self, Image};

pub const HEATMAP_MAX: u16 = u16::MAX;

/// Linear scale of a quantized heatmap: pixel `q` stands for
/// `min + q·(max − min)/65535`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatmapScale {
    pub min: f64,
    pub max: f64,
}

impl HeatmapScale {
    pub fn of(values: &[f64]) -> Self {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if min.is_finite() && max.is_finite() {
            HeatmapScale { min, max }
        } else {
            HeatmapScale { min: 0.0, max: 0.0 }
        }
    }

    pub fn step(&self) -> f64 {
        (self.max - self.min) / HEATMAP_MAX as f64
    }

    pub fn quantize(&self, v: f64) -> u16 {
        let range = self.max - self.min;
        if range <= 0.0 {
            return 0;
        }
        ((v - self.min) / range * HEATMAP_MAX as f64).round().clamp(0.0, HEATMAP_MAX as f64) as u16
    }

    pub fn dequantize(&self, q: u16) -> f64 {
        self.min + q as f64 * self.step()
    }
}

/// Quantizes an `[H, W]` map into a 16-bit PGM.
pub fn heatmap_image<T: Real>(map: &Tensor<T>) -> Result<(Image, HeatmapScale)> {
    let &[h, w] = map.shape() else {
        return Err(Error::Validation(format!("heatmap must be 2-D, got {:?}", map.shape())));
    };
    let values: Vec<f64> = map.data().iter().map(|v| v.as_f64()).collect();
    let scale = HeatmapScale::of(&values);
    let data = values.iter().map(|&v| scale.quantize(v)).collect();
    Ok((Image::gray16(w, h, data), scale))
}

/// Reads a heatmap and its sidecar back into map values.
pub fn read_heatmap(pgm: &Path, sidecar: &Path) -> Result<(Image, HeatmapScale, Vec<f64>)> {
    let img = netpbm::read(pgm)?;
    let text = std::fs::read_to_string(sidecar).at(sidecar)?;
    let scale: HeatmapScale = serde_json::from_str(&text).map_err(|e| Error::format(sidecar, e.to_string()))?;
    let values = img.data.iter().map(|&q| scale.dequantize(q)).collect();
    Ok((img, scale, values))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub image: PathBuf,
    pub score: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferOutput {
    pub record: ScoreRecord,
    pub heatmap: PathBuf,
    pub sidecar: PathBuf,
    pub score_file: PathBuf,
}

/// Output file names for `image`: `<stem>.heatmap.pgm`, `<stem>.heatmap.json`
/// and `<stem>.score.json`.
pub fn output_paths(image: &Path, out: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    (
        out.join(format!("{stem}.heatmap.pgm")),
        out.join(format!("{stem}.heatmap.json")),
        out.join(format!("{stem}.score.json")),
    )
}

/// Scores one image file and writes the three outputs into `out`.
pub fn infer_file<T: Real>(config: &RunConfig, model: &Model<T>, image: &Path, out: &Path) -> Result<InferOutput> {
    let size = model.config.backbone.image_size;
    let img = dataset::read_rgb(image)?;
    if img.width != size || img.height != size {
        return Err(Error::Validation(format!(
            "{}: image is {}x{}, model expects {size}x{size}",
            image.display(),
            img.width,
            img.height
        )));
    }
    let data = img.planar_unit().into_iter().map(T::from_f64).collect();
    let batch = Tensor::new([1, 3, size, size], data)?;
    let sigma = config.scoring.sigma_for(size);
    let result = model
        .score_images(batch, 1, sigma, config.scoring.reduction)?
        .pop()
        .ok_or_else(|| Error::Numeric("no result for image".into()))?;
    let score = result.score.as_f64();
    if !score.is_finite() {
        return Err(Error::Numeric(format!("{}: non-finite score", image.display())));
    }
    std::fs::create_dir_all(out).at(out)?;
    let (heatmap, sidecar, score_file) = output_paths(image, out);
    let (pgm, scale) = heatmap_image(&result.map)?;
    netpbm::write(&heatmap, &pgm)?;
    let scale_json = serde_json::to_string_pretty(&scale).expect("scale serializes");
    std::fs::write(&sidecar, scale_json + "\n").at(&sidecar)?;
    let record = ScoreRecord {
        image: image.to_path_buf(),
        score,
        config_hash: config.hash(),
    };
    let record_json = serde_json::to_string_pretty(&record).expect("record serializes");
    std::fs::write(&score_file, record_json + "\n").at(&score_file)?;
    Ok(InferOutput {
        record,
        heatmap,
        sidecar,
        score_file,
    })
}
