#![allow(dead_code)]

use std::path::Path;

use mvmcad::config::RunConfig;
use mvmcad::synth;
use mvmcad_core::aam::AamConfig;
use mvmcad_core::backbone::BackboneConfig;
use mvmcad_core::decoder::DecoderConfig;

/// A model small enough to train a few steps in well under a second.
pub fn tiny() -> RunConfig {
    let mut c = RunConfig::default();
    c.model.backbone = BackboneConfig {
        image_size: 16,
        patch_size: 4,
        embed_dim: 16,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        group_split: [vec![0], vec![1]],
        ..BackboneConfig::default()
    };
    c.model.aam = AamConfig { heads: 2, ..AamConfig::default() };
    c.model.decoder = DecoderConfig { depth: 2, heads: 2, mlp_ratio: 2 };
    c.train.iterations = 3;
    c.train.batch_size = 4;
    c.train.checkpoint_every = 0;
    c.data.categories = vec!["disc".into()];
    c.data.views = 2;
    c.data.train_samples = 4;
    c.data.test_normal = 2;
    c.data.test_defective = 2;
    c
}

pub fn synth_into(root: &Path, config: &RunConfig) {
    synth::write_dataset(root, &config.data, config.model.backbone.image_size, config.train.seed).unwrap();
}

/// Every file under `dir` with its bytes, in path order.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
