//! Dataset ingestion: MVTec-style directory trees, preprocessing, and a
//! deterministic procedural toy dataset for desk-scale runs.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Abnormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One image in `[0, 1]`, laid out `H x W x 3`, with an optional binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Array3<f32>,
    pub mask: Option<Array2<u8>>,
    pub label: Label,
    pub split: Split,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }

    /// Mask at the image's own size; all-zero when absent.
    pub fn mask_or_zeros(&self) -> Array2<u8> {
        self.mask
            .clone()
            .unwrap_or_else(|| Array2::zeros((self.height(), self.width())))
    }

    /// Checks the mask/label invariants.
    pub fn validate(&self) -> Result<()> {
        if let Some(mask) = &self.mask {
            if mask.dim() != (self.height(), self.width()) {
                return Err(Error::Layout(format!(
                    "sample {} has mask {:?} but image {:?}",
                    self.id,
                    mask.dim(),
                    (self.height(), self.width())
                )));
            }
            if mask.iter().any(|&v| v > 1) {
                return Err(Error::Layout(format!("sample {} mask is not binary", self.id)));
            }
        }
        let positives = self.mask.as_ref().map_or(0, |m| m.iter().filter(|&&v| v == 1).count());
        match (self.label, self.split) {
            (Label::Abnormal, Split::Train) => Err(Error::Layout(format!(
                "training sample {} is labelled abnormal",
                self.id
            ))),
            (Label::Abnormal, _) if positives == 0 => Err(Error::Layout(format!(
                "abnormal sample {} has no positive mask pixels",
                self.id
            ))),
            (Label::Normal, _) if positives > 0 => Err(Error::Layout(format!(
                "normal sample {} has positive mask pixels",
                self.id
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub category: String,
    pub resolution: usize,
    #[serde(default = "default_mean")]
    pub normalization_mean: [f32; 3],
    #[serde(default = "default_std")]
    pub normalization_std: [f32; 3],
}

fn default_mean() -> [f32; 3] {
    IMAGENET_MEAN
}

fn default_std() -> [f32; 3] {
    IMAGENET_STD
}

impl DatasetSpec {
    pub fn new(root: impl Into<PathBuf>, category: impl Into<String>, resolution: usize) -> Self {
        DatasetSpec {
            root: root.into(),
            category: category.into(),
            resolution,
            normalization_mean: IMAGENET_MEAN,
            normalization_std: IMAGENET_STD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 32 {
            return Err(Error::invalid_config("resolution", "an integer >= 32"));
        }
        if self.normalization_std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid_config("normalization_std", "three positive reals"));
        }
        Ok(())
    }

    pub fn category_dir(&self) -> PathBuf {
        self.root.join(&self.category)
    }
}

/// Reads one split of an MVTec-layout category:
/// `train/good/*.png`, `test/<defect>/*.png`, `ground_truth/<defect>/<stem>_mask.png`.
pub fn load_mvtec_category(spec: &DatasetSpec, split: Split) -> Result<Vec<Sample>> {
    spec.validate()?;
    let base = spec.category_dir();
    if !base.is_dir() {
        return Err(Error::Layout(format!("category directory {} does not exist", base.display())));
    }
    match split {
        Split::Train => {
            let dir = base.join("train").join("good");
            sorted_pngs(&dir)?
                .into_iter()
                .map(|path| {
                    let image = read_rgb(&path)?;
                    Ok(Sample {
                        id: sample_id(&spec.category, "train", "good", &path),
                        image,
                        mask: None,
                        label: Label::Normal,
                        split: Split::Train,
                    })
                })
                .collect()
        }
        Split::Test => {
            let test_dir = base.join("test");
            let mut samples = Vec::new();
            for defect_dir in sorted_entries(&test_dir, |p| p.is_dir())? {
                let defect = defect_dir
                    .file_name()
                    .and_then(|n| n.to_str())
                    .unwrap_or_default()
                    .to_string();
                for path in sorted_pngs(&defect_dir)? {
                    let image = read_rgb(&path)?;
                    let id = sample_id(&spec.category, "test", &defect, &path);
                    if defect == "good" {
                        samples.push(Sample {
                            id,
                            image,
                            mask: None,
                            label: Label::Normal,
                            split: Split::Test,
                        });
                        continue;
                    }
                    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                    let mask_path = base
                        .join("ground_truth")
                        .join(&defect)
                        .join(format!("{stem}_mask.png"));
                    if !mask_path.is_file() {
                        return Err(Error::MissingMask {
                            image: path.clone(),
                            expected: mask_path,
                        });
                    }
                    let mask = read_mask(&mask_path)?;
                    let (ih, iw) = (image.dim().0 as u32, image.dim().1 as u32);
                    if mask.dim() != (ih as usize, iw as usize) {
                        return Err(Error::MaskShape {
                            path: mask_path,
                            mask_h: mask.dim().0 as u32,
                            mask_w: mask.dim().1 as u32,
                            image_h: ih,
                            image_w: iw,
                        });
                    }
                    if !mask.iter().any(|&v| v == 1) {
                        return Err(Error::EmptyMask { path: mask_path });
                    }
                    samples.push(Sample {
                        id,
                        image,
                        mask: Some(mask),
                        label: Label::Abnormal,
                        split: Split::Test,
                    });
                }
            }
            Ok(samples)
        }
    }
}

fn sample_id(category: &str, split: &str, group: &str, path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    format!("{category}/{split}/{group}/{stem}")
}

fn sorted_entries(dir: &Path, keep: impl Fn(&Path) -> bool) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if keep(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    sorted_entries(dir, |p| {
        p.is_file()
            && p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
    })
}

/// Decodes any supported image into `H x W x 3` floats in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let raw: Vec<f32> = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Ok(Array3::from_shape_vec((h as usize, w as usize, 3), raw).expect("rgb buffer size"))
}

/// Decodes a single-channel mask, binarized at `> 0`.
pub fn read_mask(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    let raw: Vec<u8> = img.into_raw().into_iter().map(|v| u8::from(v > 0)).collect();
    Ok(Array2::from_shape_vec((h as usize, w as usize), raw).expect("mask buffer size"))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

/// Writes an `H x W x 3` image with values in `[0, 1]`, creating parent
/// directories.
pub fn write_rgb_png(image: &Array3<f32>, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let (h, w, _) = image.dim();
    let raw: Vec<u8> = image
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("rgb buffer size");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_mask_png(mask: &Array2<u8>, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let (h, w) = mask.dim();
    let raw: Vec<u8> = mask.iter().map(|&v| if v > 0 { 255 } else { 0 }).collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, raw).expect("mask buffer size");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Bilinear resampling with half-pixel centers and edge clamping
/// (`align_corners = false`). Same-size resizes are the identity.
pub fn resize_bilinear(src: ArrayView2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (in_h, in_w) = src.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return src.to_owned();
    }
    let rows = axis_taps(in_h, out_h);
    let cols = axis_taps(in_w, out_w);
    let mut out = Array2::zeros((out_h, out_w));
    for (y, &(y0, y1, wy)) in rows.iter().enumerate() {
        for (x, &(x0, x1, wx)) in cols.iter().enumerate() {
            let top = src[[y0, x0]] * (1.0 - wx) + src[[y0, x1]] * wx;
            let bottom = src[[y1, x0]] * (1.0 - wx) + src[[y1, x1]] * wx;
            out[[y, x]] = top * (1.0 - wy) + bottom * wy;
        }
    }
    out
}

fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

/// Nearest-neighbour resampling sampling each output pixel's center.
pub fn resize_nearest(src: ArrayView2<u8>, out_h: usize, out_w: usize) -> Array2<u8> {
    let (in_h, in_w) = src.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return src.to_owned();
    }
    let pick = |o: usize, n_in: usize, n_out: usize| {
        (((o as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1)
    };
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        src[[pick(y, in_h, out_h), pick(x, in_w, out_w)]]
    })
}

/// A sample resized to `R x R` and normalized, laid out `3 x R x R`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub id: String,
    pub image: Array3<f32>,
    pub mask: Option<Array2<u8>>,
    pub label: Label,
}

impl Prepared {
    pub fn resolution(&self) -> usize {
        self.image.dim().1
    }

    pub fn mask_or_zeros(&self) -> Array2<u8> {
        let r = self.resolution();
        self.mask.clone().unwrap_or_else(|| Array2::zeros((r, r)))
    }
}

pub fn preprocess(sample: &Sample, spec: &DatasetSpec) -> Prepared {
    let r = spec.resolution;
    let mut image = Array3::zeros((3, r, r));
    for c in 0..3 {
        let plane = resize_bilinear(sample.image.index_axis(Axis(2), c), r, r);
        let (m, s) = (spec.normalization_mean[c], spec.normalization_std[c]);
        image
            .index_axis_mut(Axis(0), c)
            .assign(&plane.mapv(|v| (v - m) / s));
    }
    let mask = sample.mask.as_ref().map(|m| resize_nearest(m.view(), r, r));
    Prepared {
        id: sample.id.clone(),
        image,
        mask,
        label: sample.label,
    }
}

/// Inverse of the normalization step, returning `H x W x 3` in image space.
pub fn denormalize(image: &Array3<f32>, spec: &DatasetSpec) -> Array3<f32> {
    let (_, h, w) = image.dim();
    Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        image[[c, y, x]] * spec.normalization_std[c] + spec.normalization_mean[c]
    })
}

/// Counts for [`generate_toy_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyCounts {
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_abnormal: usize,
}

const TOY_TRAIN: u16 = 1;
const TOY_TEST_NORMAL: u16 = 2;
const TOY_TEST_ABNORMAL: u16 = 3;

/// Procedural striped texture with smoothed grain. Normals share one texture
/// family; abnormals are normals with planted blobs of foreign texture.
/// Returned order: train normals, test normals, test abnormals.
pub fn generate_toy_dataset(
    seed: u64,
    n_train: usize,
    n_test_normal: usize,
    n_test_abnormal: usize,
    resolution: usize,
) -> Vec<Sample> {
    let mut out = Vec::with_capacity(n_train + n_test_normal + n_test_abnormal);
    for i in 0..n_train {
        let mut rng = rng::stream(seed, rng::stream_id(TOY_TRAIN, i as u32, 0));
        out.push(Sample {
            id: format!("toy/train/good/{i:04}"),
            image: toy_texture(&mut rng, resolution),
            mask: None,
            label: Label::Normal,
            split: Split::Train,
        });
    }
    for i in 0..n_test_normal {
        let mut rng = rng::stream(seed, rng::stream_id(TOY_TEST_NORMAL, i as u32, 0));
        out.push(Sample {
            id: format!("toy/test/good/{i:04}"),
            image: toy_texture(&mut rng, resolution),
            mask: None,
            label: Label::Normal,
            split: Split::Test,
        });
    }
    for i in 0..n_test_abnormal {
        let mut rng = rng::stream(seed, rng::stream_id(TOY_TEST_ABNORMAL, i as u32, 0));
        let mut image = toy_texture(&mut rng, resolution);
        let (mask, _area) = plant_anomalies(&mut image, &mut rng);
        out.push(Sample {
            id: format!("toy/test/anomaly/{i:04}"),
            image,
            mask: Some(mask),
            label: Label::Abnormal,
            split: Split::Test,
        });
    }
    out
}

pub fn toy_dataset(seed: u64, counts: ToyCounts, resolution: usize) -> Vec<Sample> {
    generate_toy_dataset(
        seed,
        counts.n_train,
        counts.n_test_normal,
        counts.n_test_abnormal,
        resolution,
    )
}

pub fn toy_texture<R: Rng>(rng: &mut R, resolution: usize) -> Array3<f32> {
    let r = resolution;
    let period = (r as f32 / 8.0).max(4.0);
    let base = [
        0.55 + rng.random_range(-0.03..0.03),
        0.42 + rng.random_range(-0.03..0.03),
        0.30 + rng.random_range(-0.03..0.03),
    ];
    let theta = std::f32::consts::FRAC_PI_6 + 0.05 * rng.sample::<f32, _>(StandardNormal);
    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let phase2: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let grain = smoothed_noise(rng, r, 2);
    let (ct, st) = (theta.cos(), theta.sin());
    let two_pi = std::f32::consts::TAU;
    Array3::from_shape_fn((r, r, 3), |(y, x, c)| {
        let (xf, yf) = (x as f32, y as f32);
        let along = two_pi * (xf * ct + yf * st) / period + phase;
        let across = two_pi * (-xf * st + yf * ct) / (2.0 * period) + phase2;
        let v = base[c] + 0.12 * along.sin() + 0.05 * across.sin() + 0.04 * grain[[y, x]];
        v.clamp(0.0, 1.0)
    })
}

fn smoothed_noise<R: Rng>(rng: &mut R, r: usize, radius: usize) -> Array2<f32> {
    let white = Array2::from_shape_fn((r, r), |_| rng.sample::<f32, _>(StandardNormal));
    let k = (2 * radius + 1) as f32;
    let blur_rows = Array2::from_shape_fn((r, r), |(y, x)| {
        let lo = x.saturating_sub(radius);
        let hi = (x + radius).min(r - 1);
        white.slice(s![y, lo..=hi]).sum() / k
    });
    let blurred = Array2::from_shape_fn((r, r), |(y, x)| {
        let lo = y.saturating_sub(radius);
        let hi = (y + radius).min(r - 1);
        blur_rows.slice(s![lo..=hi, x]).sum() / k
    });
    // Restore roughly unit variance after averaging (2r+1)^2 samples.
    blurred * k
}

/// Plants 1–3 elliptical blobs of foreign texture into `image` (`H x W x 3`).
/// Returns the exact blob mask and its positive-pixel count.
pub fn plant_anomalies<R: Rng>(image: &mut Array3<f32>, rng: &mut R) -> (Array2<u8>, usize) {
    let (h, w, _) = image.dim();
    let r = h.min(w) as f32;
    let mut mask = Array2::<u8>::zeros((h, w));
    let n_blobs = rng.random_range(1..=3);
    for _ in 0..n_blobs {
        let ra = rng.random_range(r / 16.0..r / 6.0).max(2.0);
        let rb = rng.random_range(r / 16.0..r / 6.0).max(2.0);
        let rot: f32 = rng.random_range(0.0..std::f32::consts::PI);
        let cy = rng.random_range(ra.max(rb)..(h as f32 - ra.max(rb)).max(ra.max(rb) + 1.0));
        let cx = rng.random_range(ra.max(rb)..(w as f32 - ra.max(rb)).max(ra.max(rb) + 1.0));
        let kind = rng.random_range(0..3u8);
        let color = [
            rng.random_range(0.0..1.0f32),
            rng.random_range(0.0..1.0f32),
            rng.random_range(0.6..1.0f32),
        ];
        let freq = rng.random_range(0.6..1.2f32);
        let (cr, sr) = (rot.cos(), rot.sin());
        for y in 0..h {
            for x in 0..w {
                let dy = y as f32 + 0.5 - cy;
                let dx = x as f32 + 0.5 - cx;
                let u = (dx * cr + dy * sr) / ra;
                let v = (-dx * sr + dy * cr) / rb;
                if u * u + v * v > 1.0 {
                    continue;
                }
                mask[[y, x]] = 1;
                for c in 0..3 {
                    let orig = image[[y, x, c]];
                    let new = match kind {
                        // stain
                        0 => 0.3 * orig + 0.7 * color[c],
                        // cross-hatched scratches
                        1 => 0.5 + 0.3 * (freq * (dx * sr - dy * cr)).sin().signum() * 0.8,
                        // speckle
                        _ => orig + rng.random_range(-0.35..0.35f32),
                    };
                    image[[y, x, c]] = new.clamp(0.0, 1.0);
                }
            }
        }
    }
    let area = mask.iter().filter(|&&v| v == 1).count();
    (mask, area)
}
