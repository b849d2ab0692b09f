//! MVTN tensor dumps: backbone weight export/import and AAM traces.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mvmcad_core::model::Model;
use mvmcad_core::{Real, Tape, Tensor};

use crate::error::{Error, IoContext, Result};
use crate::mvtn;

pub const EXTENSION: &str = "mvtn";

fn tensor_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.{EXTENSION}"))
}

/// Writes every frozen backbone tensor as `<dir>/<name>.mvtn`.
pub fn export_backbone<T: Real>(model: &Model<T>, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).at(dir)?;
    model
        .frozen_tensors()
        .into_iter()
        .map(|(name, t)| {
            let path = tensor_path(dir, &name);
            mvtn::write(&path, t)?;
            Ok(path)
        })
        .collect()
}

/// Replaces the backbone weights of `model` with the dumps in `dir`. Every
/// backbone tensor must be present with its configured shape.
pub fn import_backbone<T: Real>(model: &mut Model<T>, dir: &Path) -> Result<usize> {
    let mut loaded = BTreeMap::new();
    for (name, t) in model.frozen_tensors() {
        let path = tensor_path(dir, &name);
        if !path.exists() {
            return Err(Error::format(dir, format!("missing backbone tensor {name}")));
        }
        let stored = mvtn::read(&path)?;
        if stored.shape() != t.shape() {
            return Err(Error::format(
                &path,
                format!("shape {:?}, model expects {:?}", stored.shape(), t.shape()),
            ));
        }
        loaded.insert(name, stored.to_real::<T>());
    }
    let mut count = 0;
    model.params.backbone.visit_mut("backbone", &mut |name, t| {
        if let Some(v) = loaded.remove(&name) {
            *t = v;
            count += 1;
        }
    });
    Ok(count)
}

/// Intermediate tensors of the amplification module for one batch, by name.
pub fn aam_trace<T: Real>(model: &Model<T>, images: Tensor<T>) -> Result<Vec<(&'static str, Tensor<T>)>> {
    if !model.config.toggles.aam_enabled {
        return Err(Error::Validation("the amplification module is disabled in this config".into()));
    }
    let views = images.shape()[0];
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let fwd = model.forward(&mut tape, &bound, images, views)?;
    let trace = fwd.aam.ok_or_else(|| Error::Validation("forward pass produced no trace".into()))?;
    Ok([
        ("f_i", fwd.f_i),
        ("f_ctx", trace.f_ctx),
        ("f_hat", trace.f_hat),
        ("sim", trace.sim),
        ("pi", trace.pi),
        ("att", trace.att),
        ("out", trace.out),
    ]
    .into_iter()
    .map(|(n, v)| (n, tape.value(v).clone()))
    .collect())
}

/// Writes each traced tensor as `<dir>/<name>.mvtn`.
pub fn write_trace<T: Real>(trace: &[(&str, Tensor<T>)], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).at(dir)?;
    trace
        .iter()
        .map(|(name, t)| {
            let path = tensor_path(dir, name);
            mvtn::write(&path, t)?;
            Ok(path)
        })
        .collect()
}
