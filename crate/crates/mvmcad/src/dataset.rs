//! On-disk dataset layout:
//!
//! ```text
//! <root>/<category>/train/ok/<sample>_<view>.ppm
//! <root>/<category>/test/ok/<sample>_<view>.ppm
//! <root>/<category>/test/ng/<sample>_<view>.ppm
//! <root>/<category>/ground_truth/<sample>_<view>_mask.pgm
//! ```
//!
//! Images may be PPM (RGB) or PGM (gray, replicated to three channels).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mvmcad_core::{Real, Tensor};

use crate::error::{Error, IoContext, Result};
use crate::netpbm::{self, Image};

pub const GROUND_TRUTH: &str = "ground_truth";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    TestOk,
    TestNg,
}

impl Split {
    pub fn dir(self) -> PathBuf {
        match self {
            Split::Train => Path::new("train").join("ok"),
            Split::TestOk => Path::new("test").join("ok"),
            Split::TestNg => Path::new("test").join("ng"),
        }
    }
}

pub fn sample_name(index: usize) -> String {
    format!("{index:03}")
}

pub fn image_file(sample: &str, view: usize) -> String {
    format!("{sample}_{view}.ppm")
}

pub fn mask_file(sample: &str, view: usize) -> String {
    format!("{sample}_{view}_mask.pgm")
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub path: PathBuf,
    pub view: usize,
    /// Three-channel image.
    pub image: Image,
    /// Row-major defect mask; all false for normal views.
    pub mask: Vec<bool>,
}

impl View {
    pub fn anomalous(&self) -> bool {
        self.mask.iter().any(|&m| m)
    }

    /// `[3, H, W]` tensor in `[0, 1]`.
    pub fn tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.image.planar_unit().into_iter().map(T::from_f64).collect();
        Tensor::new([3, self.image.height, self.image.width], data).expect("image shape")
    }

    pub fn mask_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
        Tensor::new([self.image.height, self.image.width], data).expect("mask shape")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewSample {
    pub category: String,
    pub split: Split,
    pub sample_id: String,
    pub views: Vec<View>,
}

impl MultiViewSample {
    pub fn anomalous(&self) -> bool {
        self.views.iter().any(View::anomalous)
    }
}

/// Loads an image as three channels.
pub fn read_rgb(path: &Path) -> Result<Image> {
    let img = netpbm::read(path)?;
    Ok(match img.channels {
        3 => img,
        _ => Image {
            channels: 3,
            data: img.data.iter().flat_map(|&v| [v, v, v]).collect(),
            ..img
        },
    })
}

fn read_mask(path: &Path, width: usize, height: usize) -> Result<Vec<bool>> {
    let m = netpbm::read(path)?;
    if m.channels != 1 {
        return Err(Error::format(path, "mask must be a single-channel PGM"));
    }
    if m.width != width || m.height != height {
        return Err(Error::format(
            path,
            format!("mask is {}x{}, image is {width}x{height}", m.width, m.height),
        ));
    }
    Ok(m.data.iter().map(|&v| v > 0).collect())
}

/// Splits `<sample>_<view>.<ext>` into its parts.
fn parse_name(path: &Path) -> Option<(String, usize)> {
    let ext = path.extension()?.to_str()?;
    if ext != "ppm" && ext != "pgm" {
        return None;
    }
    let stem = path.file_stem()?.to_str()?;
    let (sample, view) = stem.rsplit_once('_')?;
    Some((sample.to_string(), view.parse().ok()?))
}

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut entries = std::fs::read_dir(dir)
        .at(dir)?
        .map(|e| e.map(|e| e.path()).at(dir))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Category directories under `root`, in lexicographic order.
pub fn categories(root: &Path) -> Result<Vec<String>> {
    Ok(list_dir(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(String::from))
        .collect())
}

/// All samples of one split, grouped by sample id, in lexicographic order of
/// category then sample.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<MultiViewSample>> {
    let cats = categories(root)?;
    if cats.is_empty() {
        return Err(Error::Validation(format!("{}: no category directories", root.display())));
    }
    let mut out = Vec::new();
    for cat in cats {
        let dir = root.join(&cat).join(split.dir());
        let mut groups: BTreeMap<String, Vec<View>> = BTreeMap::new();
        for path in list_dir(&dir)? {
            let Some((sample, view)) = parse_name(&path) else { continue };
            let image = read_rgb(&path)?;
            let mask = if split == Split::TestNg {
                let mpath = root.join(&cat).join(GROUND_TRUTH).join(mask_file(&sample, view));
                if !mpath.exists() {
                    return Err(Error::format(&path, format!("missing mask {}", mpath.display())));
                }
                read_mask(&mpath, image.width, image.height)?
            } else {
                vec![false; image.width * image.height]
            };
            groups.entry(sample).or_default().push(View { path, view, image, mask });
        }
        for (sample_id, mut views) in groups {
            views.sort_by_key(|v| v.view);
            out.push(MultiViewSample {
                category: cat.clone(),
                split,
                sample_id,
                views,
            });
        }
    }
    Ok(out)
}

/// Training views, all normal.
pub fn load_train(root: &Path) -> Result<Vec<MultiViewSample>> {
    let train = load_split(root, Split::Train)?;
    if train.iter().all(|s| s.views.is_empty()) || train.is_empty() {
        return Err(Error::Validation(format!("{}: training split is empty", root.display())));
    }
    Ok(train)
}

/// Normal test samples followed by defective ones.
pub fn load_test(root: &Path) -> Result<Vec<MultiViewSample>> {
    let mut test = load_split(root, Split::TestOk)?;
    test.extend(load_split(root, Split::TestNg)?);
    if test.is_empty() {
        return Err(Error::Validation(format!("{}: test split is empty", root.display())));
    }
    Ok(test)
}

/// Every view must have the configured size.
pub fn check_size(samples: &[MultiViewSample], size: usize) -> Result<()> {
    for s in samples {
        for v in &s.views {
            if v.image.width != size || v.image.height != size {
                return Err(Error::Validation(format!(
                    "{}: image is {}x{}, model expects {size}x{size}",
                    v.path.display(),
                    v.image.width,
                    v.image.height
                )));
            }
        }
    }
    Ok(())
}
