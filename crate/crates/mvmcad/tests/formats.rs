mod common;

use common::*;
use mvmcad::checkpoint::Checkpoint;
use mvmcad::infer::{heatmap_image, read_heatmap, HeatmapScale};
use mvmcad::mvtn::{self, AnyTensor};
use mvmcad::netpbm::{self, Image};
use mvmcad::train;
use mvmcad_core::optim::ParamUpdate;
use mvmcad_core::Tensor;
use proptest::prelude::*;

fn manual_mvtn(shape: &[u64], dtype: u8, payload: &[u8]) -> Vec<u8> {
    let mut b = b"MVTN".to_vec();
    b.extend(1u32.to_le_bytes());
    b.extend((shape.len() as u32).to_le_bytes());
    for d in shape {
        b.extend(d.to_le_bytes());
    }
    b.push(dtype);
    b.extend_from_slice(payload);
    b
}

#[test]
fn mvtn_matches_hand_built_bytes() {
    let t = Tensor::<f64>::from_f64([2, 1], &[1.5, -0.25]).unwrap();
    let payload: Vec<u8> = [1.5f64, -0.25].iter().flat_map(|v| v.to_le_bytes()).collect();
    assert_eq!(mvtn::encode(&t), manual_mvtn(&[2, 1], 1, &payload));
    let t32 = Tensor::<f32>::from_f64([3], &[1.0, 2.0, 3.0]).unwrap();
    let payload: Vec<u8> = [1.0f32, 2.0, 3.0].iter().flat_map(|v| v.to_le_bytes()).collect();
    assert_eq!(mvtn::encode(&t32), manual_mvtn(&[3], 0, &payload));
    let scalar = manual_mvtn(&[], 1, &7.0f64.to_le_bytes());
    assert_eq!(mvtn::decode(&scalar).unwrap(), AnyTensor::F64(Tensor::scalar(7.0)));
}

#[test]
fn mvtn_rejects_damage() {
    let good = manual_mvtn(&[2], 1, &[0u8; 16]);
    assert!(mvtn::decode(&good).is_ok());
    assert!(mvtn::decode(&good[..good.len() - 1]).unwrap_err().contains("payload"));
    let mut extra = good.clone();
    extra.push(0);
    assert!(mvtn::decode(&extra).unwrap_err().contains("trailing"));
    let mut magic = good.clone();
    magic[0] = b'X';
    assert!(mvtn::decode(&magic).is_err());
    assert!(mvtn::decode(&manual_mvtn(&[2], 9, &[0u8; 16])).unwrap_err().contains("dtype"));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.mvtn");
    std::fs::write(&path, &magic).unwrap();
    let err = mvtn::read(&path).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("bad.mvtn"));
}

proptest! {
    #[test]
    fn mvtn_round_trips(shape in prop::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
        let n: usize = shape.iter().product();
        let mut x = seed;
        let data: Vec<f64> = (0..n).map(|_| { x = x.wrapping_mul(6364136223846793005).wrapping_add(1); (x >> 11) as f64 / (1u64 << 53) as f64 - 0.5 }).collect();
        let t = Tensor::new(shape.clone(), data).unwrap();
        let any = mvtn::decode(&mvtn::encode(&t)).unwrap();
        prop_assert_eq!(any.to_real::<f64>(), t.clone());
        let t32: Tensor<f32> = t.cast();
        prop_assert_eq!(mvtn::decode(&mvtn::encode(&t32)).unwrap(), AnyTensor::F32(t32));
    }

    #[test]
    fn netpbm_round_trips(w in 1usize..6, h in 1usize..6, rgb in any::<bool>(), wide in any::<bool>(), seed in any::<u16>()) {
        let c = if rgb { 3 } else { 1 };
        let maxval = if wide { 65535u16 } else { 255 };
        let data: Vec<u16> = (0..w * h * c).map(|i| ((i as u32 * 7919 + seed as u32) % (maxval as u32 + 1)) as u16).collect();
        let img = Image { width: w, height: h, channels: c, maxval, data };
        prop_assert_eq!(Image::decode(&img.encode()).unwrap(), img);
    }
}

#[test]
fn netpbm_header_forms() {
    let mut bytes = b"P5\n# comment line\n2 1\n# another\n255\n".to_vec();
    bytes.extend([10u8, 200]);
    let img = Image::decode(&bytes).unwrap();
    assert_eq!((img.width, img.height, img.channels, img.maxval), (2, 1, 1, 255));
    assert_eq!(img.data, vec![10, 200]);
    let mut wide = b"P5 1 1 1000 ".to_vec();
    wide.extend(999u16.to_be_bytes());
    assert_eq!(Image::decode(&wide).unwrap().data, vec![999]);
    let n = wide.len();
    wide[n - 2..].copy_from_slice(&1001u16.to_be_bytes());
    assert!(Image::decode(&wide).is_err());
    assert!(Image::decode(b"P3\n1 1\n255\n0 0 0").is_err());
    assert!(Image::decode(b"P6\n2 2\n255\n\x00\x00").unwrap_err().contains("raster"));
}

#[test]
fn planar_unit_layout() {
    let img = Image::rgb8(2, 1, vec![255, 0, 51, 0, 255, 102]);
    assert_eq!(img.planar_unit(), vec![1.0, 0.0, 0.0, 1.0, 0.2, 0.4]);
}

#[test]
fn checkpoint_save_load_save_is_bitwise_stable() {
    let config = tiny();
    let (mut model, mut optim) = train::initialize::<f32>(&config).unwrap();
    // give the optimizer some state to carry
    let mut p = Tensor::<f32>::zeros([2]);
    let g = Tensor::<f32>::from_f64([2], &[0.5, -1.0]).unwrap();
    optim.step(&mut [ParamUpdate { name: "decoder.blocks.0.b1", param: &mut p, grad: &g }]).unwrap();
    model.params.decoder.blocks[0].b1.data_mut()[0] = 0.125;
    let ckpt = Checkpoint::capture(&config, &model, &optim, 17);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.mvmc"), dir.path().join("b.mvmc"));
    ckpt.save(&a).unwrap();
    let loaded = Checkpoint::load(&a).unwrap();
    assert_eq!(loaded, ckpt);
    loaded.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let (cfg2, model2, optim2) = loaded.restore::<f32>().unwrap();
    assert_eq!(cfg2, config);
    assert_eq!(model2.params, model.params);
    assert_eq!(optim2.step, 1);
    assert_eq!(optim2.state, optim.state);
    assert_eq!(loaded.iteration, 17);
    assert!(!dir.path().join("a.tmp").exists());
}

#[test]
fn checkpoint_rejects_truncation_and_unknown_tensors() {
    let config = tiny();
    let (model, optim) = train::initialize::<f32>(&config).unwrap();
    let ckpt = Checkpoint::capture(&config, &model, &optim, 0);
    let bytes = ckpt.encode();
    assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
    let mut extra = ckpt.clone();
    extra.tensors.push(("nonsense".into(), AnyTensor::F32(Tensor::zeros([1]))));
    assert!(extra.restore::<f32>().unwrap_err().to_string().contains("nonsense"));
    let mut missing = ckpt.clone();
    missing.tensors.retain(|(n, _)| n != "aam.wq");
    assert!(missing.restore::<f32>().unwrap_err().to_string().contains("aam.wq"));
}

#[test]
fn heatmap_recovers_map_within_half_step() {
    let map = Tensor::<f64>::from_fn([7, 9], |i| ((i as f64) * 0.61).sin() * 0.3 + 0.4);
    let (img, scale) = heatmap_image(&map).unwrap();
    assert_eq!((img.width, img.height, img.maxval), (9, 7, 65535));
    let dir = tempfile::tempdir().unwrap();
    let (pgm, json) = (dir.path().join("h.pgm"), dir.path().join("h.json"));
    netpbm::write(&pgm, &img).unwrap();
    std::fs::write(&json, serde_json::to_string(&scale).unwrap()).unwrap();
    let (_, back_scale, values) = read_heatmap(&pgm, &json).unwrap();
    assert_eq!(back_scale, scale);
    let lo = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(scale, HeatmapScale { min: lo, max: hi });
    let half = (hi - lo) / 65535.0 / 2.0;
    for (v, m) in values.iter().zip(map.data()) {
        assert!((v - m).abs() <= half * (1.0 + 1e-9), "{v} vs {m}");
    }
}
