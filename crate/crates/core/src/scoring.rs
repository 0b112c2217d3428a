//! Anomaly maps: per-hierarchy discrepancy fields upsampled to the input
//! resolution and summed.

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::{ImageBuffer, Luma};
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{resize_bilinear, Prepared};
use crate::error::{Error, Result};
use crate::features::{discrepancy, normalize_features, ApprenticeModel, DiscrepancyMode, ExpertModel};

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub scores: Array2<f32>,
    pub source_id: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringConfig {
    pub discrepancy: DiscrepancyMode,
    /// Standard deviation of an optional Gaussian blur, in pixels.
    pub blur_sigma: Option<f32>,
}

/// Stacks `3 x R x R` images into a `B x 3 x R x R` tensor.
pub fn image_batch(images: &[&Array3<f32>], device: &Device) -> Result<Tensor> {
    let first = images.first().ok_or(Error::EmptyInput("image batch"))?;
    let (c, h, w) = first.dim();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for im in images {
        if im.dim() != (c, h, w) {
            return Err(Error::InvalidArgument(format!(
                "image batch mixes shapes {:?} and {:?}",
                (c, h, w),
                im.dim()
            )));
        }
        data.extend(im.iter().copied());
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), device)?)
}

/// Upsamples each field to `out x out` and sums them.
pub fn combine_fields(fields: &[Array2<f32>], out: usize) -> Array2<f32> {
    let mut acc = Array2::<f32>::zeros((out, out));
    for f in fields {
        acc += &resize_bilinear(f.view(), out, out);
    }
    acc
}

fn check_hierarchies(requested: &[usize], available: &[usize]) -> Result<Vec<usize>> {
    if requested.is_empty() {
        return Err(Error::HierarchyMismatch {
            requested: requested.to_vec(),
            available: available.to_vec(),
        });
    }
    requested
        .iter()
        .map(|h| {
            available.iter().position(|a| a == h).ok_or_else(|| Error::HierarchyMismatch {
                requested: requested.to_vec(),
                available: available.to_vec(),
            })
        })
        .collect()
}

/// Per-image, per-hierarchy discrepancy fields at native feature resolution.
pub fn discrepancy_fields(
    images: &[&Array3<f32>],
    expert: &ExpertModel,
    apprentice: &ApprenticeModel,
    hierarchies: &[usize],
    mode: DiscrepancyMode,
    device: &Device,
) -> Result<Vec<Vec<Array2<f32>>>> {
    let positions = check_hierarchies(hierarchies, apprentice.hierarchies())?;
    check_hierarchies(hierarchies, expert.hierarchies())?;
    let x = image_batch(images, device)?;
    let fe = normalize_features(&expert.forward(&x)?)?;
    let fa = normalize_features(&apprentice.forward(&x, false)?)?;
    let field = discrepancy(&fe, &fa, mode)?;
    let mut out = vec![Vec::with_capacity(positions.len()); images.len()];
    for &p in &positions {
        for (img, map) in field.level_maps(p)?.into_iter().enumerate() {
            out[img].push(map);
        }
    }
    Ok(out)
}

/// Maps for a batch of preprocessed images.
pub fn anomaly_maps(
    batch: &[&Prepared],
    expert: &ExpertModel,
    apprentice: &ApprenticeModel,
    hierarchies: &[usize],
    cfg: &ScoringConfig,
    device: &Device,
) -> Result<Vec<AnomalyMap>> {
    let images: Vec<&Array3<f32>> = batch.iter().map(|p| &p.image).collect();
    let fields = discrepancy_fields(&images, expert, apprentice, hierarchies, cfg.discrepancy, device)?;
    Ok(batch
        .iter()
        .zip(fields)
        .map(|(p, f)| {
            let mut scores = combine_fields(&f, p.resolution());
            if let Some(sigma) = cfg.blur_sigma {
                scores = gaussian_blur(&scores, sigma);
            }
            AnomalyMap {
                scores,
                source_id: p.id.clone(),
            }
        })
        .collect())
}

pub fn anomaly_map(
    image: &Prepared,
    expert: &ExpertModel,
    apprentice: &ApprenticeModel,
    hierarchies: &[usize],
    cfg: &ScoringConfig,
    device: &Device,
) -> Result<AnomalyMap> {
    Ok(anomaly_maps(&[image], expert, apprentice, hierarchies, cfg, device)?.remove(0))
}

/// Maximum of the map.
pub fn image_score(map: &AnomalyMap) -> f32 {
    map.scores.iter().copied().fold(0.0, f32::max)
}

/// Separable Gaussian blur with reflected borders, truncated at 4 sigma.
pub fn gaussian_blur(map: &Array2<f32>, sigma: f32) -> Array2<f32> {
    if !(sigma > 0.0) {
        return map.clone();
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let reflect = |i: isize, n: isize| -> usize {
        let period = 2 * n;
        let mut j = i.rem_euclid(period);
        if j >= n {
            j = period - 1 - j;
        }
        j as usize
    };
    let blur_axis = |src: &Array2<f32>, axis: Axis| {
        let mut out = Array2::<f32>::zeros(src.dim());
        let n = src.len_of(axis) as isize;
        for (mut dst, line) in out.lanes_mut(axis).into_iter().zip(src.lanes(axis)) {
            for i in 0..n {
                dst[i as usize] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * line[reflect(i + k as isize - radius, n)])
                    .sum();
            }
        }
        out
    };
    blur_axis(&blur_axis(map, Axis(1)), Axis(0))
}

/// Rescaling information stored next to a 16-bit heatmap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub min: f32,
    pub max: f32,
    pub source_id: String,
}

fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("json")
}

/// Writes a 16-bit grayscale PNG spanning `[min, max]` and a JSON sidecar
/// holding the range.
pub fn write_heatmap(map: &AnomalyMap, png: &Path) -> Result<HeatmapSidecar> {
    let (h, w) = map.scores.dim();
    let min = map.scores.iter().copied().fold(f32::INFINITY, f32::min);
    let max = map.scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = max - min;
    let mut buf = ImageBuffer::<Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for ((y, x), &v) in map.scores.indexed_iter() {
        let q = if span > 0.0 {
            ((v - min) / span * 65535.0).round() as u16
        } else {
            0
        };
        buf.put_pixel(x as u32, y as u32, Luma([q]));
    }
    if let Some(parent) = png.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    buf.save(png).map_err(|source| Error::Image {
        path: png.to_path_buf(),
        source,
    })?;
    let sidecar = HeatmapSidecar {
        min,
        max,
        source_id: map.source_id.clone(),
    };
    let json = sidecar_path(png);
    std::fs::write(&json, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&json, e))?;
    Ok(sidecar)
}

/// Reads a heatmap written by [`write_heatmap`]; values are exact up to
/// `(max - min) / 65535 / 2`.
pub fn read_heatmap(png: &Path) -> Result<AnomalyMap> {
    let json = sidecar_path(png);
    let bytes = std::fs::read(&json).map_err(|e| Error::io(&json, e))?;
    let sidecar: HeatmapSidecar = serde_json::from_slice(&bytes)?;
    let img = image::open(png)
        .map_err(|source| Error::Image {
            path: png.to_path_buf(),
            source,
        })?
        .into_luma16();
    let (w, h) = img.dimensions();
    let span = sidecar.max - sidecar.min;
    let scores = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        sidecar.min + img.get_pixel(x as u32, y as u32)[0] as f32 / 65535.0 * span
    });
    Ok(AnomalyMap {
        scores,
        source_id: sidecar.source_id,
    })
}

/// Raw map as CSV, one row per image row.
pub fn write_map_csv(map: &AnomalyMap, path: &Path) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in map.scores.rows() {
        wtr.write_record(row.iter().map(|v| format!("{v:e}")))?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_map_csv(path: &Path) -> Result<Array2<f32>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut rows: Vec<Vec<f32>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        rows.push(
            rec.iter()
                .map(|v| v.parse::<f32>().map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display()))))
                .collect::<Result<_>>()?,
        );
    }
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    Array2::from_shape_vec((h, w), rows.concat()).map_err(|e| Error::InvalidArgument(e.to_string()))
}
