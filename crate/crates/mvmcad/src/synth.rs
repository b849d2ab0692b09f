//! Procedural multi-view objects with injected defects.
//!
//! Each sample is one latent object rendered under `V` fixed per-view affine
//! transforms. Defective test samples receive a scratch, blob or edge chip in
//! a random non-empty subset of views; the masks are exact by construction.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::dataset::{self, Split};
use crate::error::{Error, IoContext, Result};
use crate::netpbm::{self, Image};

const BACKGROUND: [f64; 3] = [0.10, 0.10, 0.12];
const SCRATCH: [f64; 3] = [0.20, 0.95, 0.30];
const BLOB: [f64; 3] = [0.60, 0.10, 0.75];
const NOISE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    Scratch,
    Blob,
    EdgeChip,
}

/// Shape family of a category, chosen by its position in the category list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    /// Shaded orange disc with a darker rim ring.
    Disc,
    /// Blue striped plate.
    Plate,
    /// Yellow checkered diamond.
    Diamond,
}

impl Family {
    pub fn of_index(i: usize) -> Family {
        [Family::Disc, Family::Plate, Family::Diamond][i % 3]
    }
}

/// Latent object shared by every view of a sample.
#[derive(Debug, Clone, Copy)]
struct Latent {
    family: Family,
    size: f64,
    aspect: f64,
    phase: f64,
    shade: [f64; 2],
    tint: f64,
}

impl Latent {
    fn draw(family: Family, rng: &mut ChaCha8Rng) -> Self {
        let a = rng.random_range(0.0..2.0 * PI);
        Latent {
            family,
            size: rng.random_range(0.92..1.08),
            aspect: rng.random_range(0.9..1.1),
            phase: rng.random_range(0.0..2.0 * PI),
            shade: [a.cos(), a.sin()],
            tint: rng.random_range(-0.04..0.04),
        }
    }

    /// Coverage in `[0, 1]` and colour at object coordinates `(u, v)`;
    /// `px` is the object-space size of one pixel, for edge smoothing.
    fn sample(&self, u: f64, v: f64, px: f64) -> (f64, [f64; 3]) {
        let (u, v) = (u / self.size, v / (self.size * self.aspect));
        let shade = 1.0 - 0.25 * (u * self.shade[0] + v * self.shade[1]);
        match self.family {
            Family::Disc => {
                let r = (u * u + v * v).sqrt();
                let sd = r - 0.72;
                let ring = if (r - 0.5).abs() < 0.06 { 0.75 } else { 1.0 };
                let k = shade * ring;
                (cover(sd, px), [(0.95 + self.tint) * k, 0.55 * k, 0.15 * k])
            }
            Family::Plate => {
                let sd = (u.abs() - 0.78).max(v.abs() - 0.55);
                let stripe = 0.8 + 0.2 * (9.0 * u + self.phase).sin();
                let k = shade * stripe;
                (cover(sd, px), [0.20 * k, (0.42 + self.tint) * k, 0.90 * k])
            }
            Family::Diamond => {
                let sd = (u.abs() + v.abs()) - 0.8;
                let check = if ((u * 4.0 + self.phase).floor() + (v * 4.0).floor()) as i64 % 2 == 0 { 1.0 } else { 0.8 };
                let k = shade * check;
                (cover(sd, px), [0.92 * k, (0.85 + self.tint) * k, 0.25 * k])
            }
        }
    }
}

fn cover(sd: f64, px: f64) -> f64 {
    (0.5 - sd / px).clamp(0.0, 1.0)
}

/// Fixed camera of view `k`: rotation, scale and offset in pixels.
fn view_transform(k: usize, size: usize) -> (f64, f64, [f64; 2]) {
    const ANGLES: [f64; 5] = [0.0, 0.45, -0.6, 1.1, -1.3];
    const SCALES: [f64; 5] = [1.0, 0.92, 0.86, 0.95, 0.82];
    const OFFSETS: [[f64; 2]; 5] = [[0.0, 0.0], [1.5, -1.0], [-1.5, 1.0], [1.0, 1.5], [-1.0, -1.5]];
    let i = k % 5;
    let lap = (k / 5) as f64;
    let s = size as f64 / 32.0;
    (ANGLES[i] + 0.3 * lap, SCALES[i], [OFFSETS[i][0] * s, OFFSETS[i][1] * s])
}

/// One rendered view: planar RGB in `[0, 1]` and the object coverage map.
#[derive(Debug, Clone)]
pub struct Rendered {
    pub size: usize,
    pub rgb: Vec<[f64; 3]>,
    pub coverage: Vec<f64>,
    pub mask: Vec<bool>,
    pub defect: Option<DefectKind>,
}

fn render(latent: &Latent, view: usize, size: usize, rng: &mut ChaCha8Rng) -> Rendered {
    let (angle, scale, offset) = view_transform(view, size);
    let half = size as f64 / 2.0;
    let unit = scale * half;
    let (c, s) = (angle.cos(), angle.sin());
    let mut rgb = Vec::with_capacity(size * size);
    let mut coverage = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let px = (x as f64 + 0.5 - half - offset[0]) / unit;
            let py = (y as f64 + 0.5 - half - offset[1]) / unit;
            let (u, v) = (c * px + s * py, -s * px + c * py);
            let (a, col) = latent.sample(u, v, 1.0 / unit);
            let mut p = [0.0; 3];
            for ch in 0..3 {
                let n = rng.random_range(-NOISE..NOISE);
                p[ch] = (a * col[ch] + (1.0 - a) * BACKGROUND[ch] + n).clamp(0.0, 1.0);
            }
            rgb.push(p);
            coverage.push(a);
        }
    }
    Rendered {
        size,
        rgb,
        coverage,
        mask: vec![false; size * size],
        defect: None,
    }
}

/// Ellipse membership of pixel centres: `((dx·c + dy·s)/a)² + ((−dx·s + dy·c)/b)² ≤ 1`.
pub fn ellipse_pixels(size: usize, centre: [f64; 2], axes: [f64; 2], angle: f64) -> Vec<bool> {
    let (c, s) = (angle.cos(), angle.sin());
    let mut out = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 + 0.5 - centre[0];
            let dy = y as f64 + 0.5 - centre[1];
            let p = (dx * c + dy * s) / axes[0];
            let q = (-dx * s + dy * c) / axes[1];
            out[y * size + x] = p * p + q * q <= 1.0;
        }
    }
    out
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (ex, ey) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    (ex * ex + ey * ey).sqrt()
}

fn object_pixels(r: &Rendered, min_cover: f64) -> Vec<usize> {
    (0..r.coverage.len()).filter(|&i| r.coverage[i] >= min_cover).collect()
}

fn paint(r: &mut Rendered, region: &[bool], colour: [f64; 3], rng: &mut ChaCha8Rng) {
    for (i, &m) in region.iter().enumerate() {
        if m {
            for ch in 0..3 {
                r.rgb[i][ch] = (colour[ch] + rng.random_range(-NOISE..NOISE)).clamp(0.0, 1.0);
            }
            r.mask[i] = true;
        }
    }
}

fn inject(r: &mut Rendered, kind: DefectKind, rng: &mut ChaCha8Rng) {
    let size = r.size;
    let inner = object_pixels(r, 0.99);
    let pick = |rng: &mut ChaCha8Rng, pool: &[usize]| {
        let i = pool[rng.random_range(0..pool.len())];
        [(i % size) as f64 + 0.5, (i / size) as f64 + 0.5]
    };
    let unit = size as f64 / 32.0;
    match kind {
        DefectKind::Blob => {
            let centre = pick(rng, &inner);
            let axes = [rng.random_range(2.0..3.5) * unit, rng.random_range(1.6..3.0) * unit];
            let region = ellipse_pixels(size, centre, axes, rng.random_range(0.0..PI));
            paint(r, &region, BLOB, rng);
        }
        DefectKind::Scratch => {
            let mut pts = vec![pick(rng, &inner)];
            let mut heading = rng.random_range(0.0..2.0 * PI);
            for _ in 0..2 {
                heading += rng.random_range(-0.8..0.8);
                let len = rng.random_range(4.0..7.0) * unit;
                let last = pts[pts.len() - 1];
                pts.push([last[0] + len * heading.cos(), last[1] + len * heading.sin()]);
            }
            let mut region = vec![false; size * size];
            for (i, m) in region.iter_mut().enumerate() {
                let p = [(i % size) as f64 + 0.5, (i / size) as f64 + 0.5];
                *m = pts.windows(2).any(|w| segment_distance(p, w[0], w[1]) <= 0.75 * unit);
            }
            paint(r, &region, SCRATCH, rng);
        }
        DefectKind::EdgeChip => {
            // object pixels that touch the background
            let edge: Vec<usize> = object_pixels(r, 0.5)
                .into_iter()
                .filter(|&i| {
                    let (x, y) = ((i % size) as i64, (i / size) as i64);
                    [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dx, dy)| {
                        let (nx, ny) = (x + dx, y + dy);
                        nx < 0 || ny < 0 || nx >= size as i64 || ny >= size as i64
                            || r.coverage[(ny as usize) * size + nx as usize] < 0.5
                    })
                })
                .collect();
            let centre = pick(rng, &edge);
            let radius = rng.random_range(3.0..4.0) * unit;
            let mut region = vec![false; size * size];
            for (i, m) in region.iter_mut().enumerate() {
                let (dx, dy) = ((i % size) as f64 + 0.5 - centre[0], (i / size) as f64 + 0.5 - centre[1]);
                *m = r.coverage[i] >= 0.5 && (dx * dx + dy * dy).sqrt() <= radius;
            }
            paint(r, &region, BACKGROUND, rng);
        }
    }
    r.defect = Some(kind);
}

/// Per-sample generator keyed on `(seed, category, split, index)`.
fn sample_rng(seed: u64, category: usize, split: Split, index: usize) -> ChaCha8Rng {
    let split_tag = match split {
        Split::Train => 0u64,
        Split::TestOk => 1,
        Split::TestNg => 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((category as u64) << 40) | (split_tag << 32) | index as u64);
    rng
}

/// Renders every view of one sample. Defective samples get at least one
/// defective view.
pub fn render_sample(
    seed: u64,
    category: usize,
    split: Split,
    index: usize,
    views: usize,
    size: usize,
) -> Vec<Rendered> {
    let mut rng = sample_rng(seed, category, split, index);
    let latent = Latent::draw(Family::of_index(category), &mut rng);
    let mut defective = vec![false; views];
    if split == Split::TestNg {
        while !defective.iter().any(|&d| d) {
            for d in defective.iter_mut() {
                *d = rng.random_bool(0.5);
            }
        }
    }
    let kinds: Vec<DefectKind> = (0..views)
        .map(|_| [DefectKind::Scratch, DefectKind::Blob, DefectKind::EdgeChip][rng.random_range(0..3)])
        .collect();
    (0..views)
        .map(|v| {
            let mut view_rng = rng.clone();
            view_rng.set_stream(view_rng.get_stream().wrapping_add(((v as u64) + 1) << 48));
            let mut r = render(&latent, v, size, &mut view_rng);
            if defective[v] {
                inject(&mut r, kinds[v], &mut view_rng);
            }
            r
        })
        .collect()
}

pub fn to_image(r: &Rendered) -> Image {
    let data = r
        .rgb
        .iter()
        .flat_map(|p| p.iter().map(|&c| (c * 255.0).round() as u8))
        .collect();
    Image::rgb8(r.size, r.size, data)
}

pub fn mask_image(r: &Rendered) -> Image {
    Image::gray8(r.size, r.size, r.mask.iter().map(|&m| if m { 255 } else { 0 }).collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SynthSummary {
    pub train_images: usize,
    pub test_images: usize,
    pub defective_views: usize,
}

/// Writes the dataset under `root` in the standard layout.
pub fn write_dataset(root: &Path, data: &DataConfig, image_size: usize, seed: u64) -> Result<SynthSummary> {
    if data.categories.is_empty() {
        return Err(Error::Validation("at least one category is required".into()));
    }
    let mut jobs = Vec::new();
    for (ci, cat) in data.categories.iter().enumerate() {
        for (split, count) in [
            (Split::Train, data.train_samples),
            (Split::TestOk, data.test_normal),
            (Split::TestNg, data.test_defective),
        ] {
            let dir = root.join(cat).join(split.dir());
            std::fs::create_dir_all(&dir).at(&dir)?;
            jobs.extend((0..count).map(|i| (ci, cat.as_str(), split, i)));
        }
        let gt = root.join(cat).join(dataset::GROUND_TRUTH);
        std::fs::create_dir_all(&gt).at(&gt)?;
    }
    let counts = jobs
        .par_iter()
        .map(|&(ci, cat, split, i)| -> Result<SynthSummary> {
            let views = render_sample(seed, ci, split, i, data.views, image_size);
            let name = dataset::sample_name(i);
            let mut s = SynthSummary::default();
            for (v, r) in views.iter().enumerate() {
                let path = root.join(cat).join(split.dir()).join(dataset::image_file(&name, v));
                netpbm::write(&path, &to_image(r))?;
                if split == Split::TestNg {
                    let mpath = root.join(cat).join(dataset::GROUND_TRUTH).join(dataset::mask_file(&name, v));
                    netpbm::write(&mpath, &mask_image(r))?;
                    s.defective_views += usize::from(r.defect.is_some());
                }
                if split == Split::Train {
                    s.train_images += 1;
                } else {
                    s.test_images += 1;
                }
            }
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(counts.into_iter().fold(SynthSummary::default(), |a, b| SynthSummary {
        train_images: a.train_images + b.train_images,
        test_images: a.test_images + b.test_images,
        defective_views: a.defective_views + b.defective_views,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_deterministic() {
        let a = render_sample(7, 0, Split::TestNg, 3, 5, 32);
        let b = render_sample(7, 0, Split::TestNg, 3, 5, 32);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(to_image(x), to_image(y));
            assert_eq!(x.mask, y.mask);
        }
    }

    #[test]
    fn defects_have_masks_and_clean_views_do_not() {
        for i in 0..30 {
            let views = render_sample(1, i % 2, Split::TestNg, i, 5, 32);
            assert!(views.iter().any(|v| v.defect.is_some()));
            for v in &views {
                assert_eq!(v.defect.is_some(), v.mask.iter().any(|&m| m), "sample {i}");
            }
        }
        for v in render_sample(1, 0, Split::TestOk, 0, 5, 32) {
            assert!(v.defect.is_none() && v.mask.iter().all(|&m| !m));
        }
    }

    #[test]
    fn views_differ_but_share_the_object() {
        let views = render_sample(3, 1, Split::Train, 0, 5, 32);
        let covered: Vec<f64> = views.iter().map(|v| v.coverage.iter().sum()).collect();
        assert_ne!(views[0].coverage, views[1].coverage);
        for c in &covered {
            assert!(*c > 100.0, "object too small: {c}");
        }
    }
}
