//! Pixel-level localization metrics and discrepancy-distribution statistics.
//!
//! All ROC-type metrics pool pixels over the whole test set. A pixel is
//! predicted positive at threshold `t` when its score is `>= t`; equal scores
//! always flip together.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_FPR_LIMIT: f64 = 0.3;
pub const DEFAULT_BINS: usize = 100;
pub const GRID_THRESHOLDS: usize = 1000;
/// Above this many pixels [`aupro`] switches to the threshold grid.
pub const EXACT_PIXEL_LIMIT: usize = 50_000_000;

/// Score maps paired with binary ground-truth masks.
#[derive(Debug, Clone, Default)]
pub struct ScoredSet {
    pub maps: Vec<Array2<f32>>,
    pub masks: Vec<Array2<u8>>,
}

impl ScoredSet {
    pub fn new(maps: Vec<Array2<f32>>, masks: Vec<Array2<u8>>) -> Result<Self> {
        let set = ScoredSet { maps, masks };
        set.validate()?;
        Ok(set)
    }

    pub fn push(&mut self, map: Array2<f32>, mask: Array2<u8>) {
        self.maps.push(map);
        self.masks.push(mask);
    }

    pub fn validate(&self) -> Result<()> {
        if self.maps.len() != self.masks.len() {
            return Err(Error::InvalidArgument(format!(
                "{} maps but {} masks",
                self.maps.len(),
                self.masks.len()
            )));
        }
        for (i, (m, g)) in self.maps.iter().zip(&self.masks).enumerate() {
            if m.dim() != g.dim() {
                return Err(Error::InvalidArgument(format!(
                    "image {i}: map {:?} vs mask {:?}",
                    m.dim(),
                    g.dim()
                )));
            }
            if g.iter().any(|&v| v > 1) {
                return Err(Error::InvalidArgument(format!("image {i}: mask is not binary")));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("image {i}: non-finite score")));
            }
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.maps.iter().map(|m| m.len()).sum()
    }

    fn pooled(&self) -> (Vec<f64>, Vec<bool>) {
        let scores = self.maps.iter().flat_map(|m| m.iter().map(|&v| v as f64)).collect();
        let labels = self.masks.iter().flat_map(|m| m.iter().map(|&v| v == 1)).collect();
        (scores, labels)
    }
}

/// Order of pixel indices by descending score.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Calls `f(group)` for each run of equal scores in `order`.
fn for_each_tie_group(scores: &[f64], order: &[usize], mut f: impl FnMut(&[usize])) {
    let mut start = 0;
    while start < order.len() {
        let s = scores[order[start]];
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == s {
            end += 1;
        }
        f(&order[start..end]);
        start = end;
    }
}

pub fn auroc_pixel(set: &ScoredSet) -> Result<f64> {
    set.validate()?;
    let (scores, labels) = set.pooled();
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument(
            "AU-ROC needs at least one positive and one negative pixel".into(),
        ));
    }
    let order = descending(&scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    for_each_tie_group(&scores, &order, |group| {
        let (tp0, fp0) = (tp, fp);
        for &i in group {
            if labels[i] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        area += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
    });
    Ok(area / (pos as f64 * neg as f64))
}

/// 8-connected component labels of a binary mask; background is 0 and
/// components are numbered from 1 in raster order of their first pixel.
pub fn label_regions(mask: &Array2<u8>) -> (Array2<u32>, usize) {
    let (h, w) = mask.dim();
    let mut parent: Vec<usize> = (0..h * w).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] != 1 {
                continue;
            }
            let here = r * w + c;
            // already-visited neighbours: W, NW, N, NE
            let mut neighbours = [None; 4];
            if c > 0 {
                neighbours[0] = Some((r, c - 1));
            }
            if r > 0 {
                if c > 0 {
                    neighbours[1] = Some((r - 1, c - 1));
                }
                neighbours[2] = Some((r - 1, c));
                if c + 1 < w {
                    neighbours[3] = Some((r - 1, c + 1));
                }
            }
            for (nr, nc) in neighbours.into_iter().flatten() {
                if mask[[nr, nc]] == 1 {
                    let a = find(&mut parent, here);
                    let b = find(&mut parent, nr * w + nc);
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
    }
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut ids: BTreeMap<usize, u32> = BTreeMap::new();
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] == 1 {
                let root = find(&mut parent, r * w + c);
                let next = ids.len() as u32 + 1;
                labels[[r, c]] = *ids.entry(root).or_insert(next);
            }
        }
    }
    (labels, ids.len())
}

/// Per-pixel region index (global across images) or `None` for negatives,
/// plus the size of every region.
fn regions(set: &ScoredSet) -> (Vec<Option<usize>>, Vec<usize>) {
    let mut region_of = Vec::with_capacity(set.pixel_count());
    let mut sizes = Vec::new();
    for mask in &set.masks {
        let (labels, n) = label_regions(mask);
        let base = sizes.len();
        sizes.extend(std::iter::repeat_n(0, n));
        for &l in labels.iter() {
            if l == 0 {
                region_of.push(None);
            } else {
                let id = base + l as usize - 1;
                sizes[id] += 1;
                region_of.push(Some(id));
            }
        }
    }
    (region_of, sizes)
}

/// Area under a piecewise-linear curve through `points` (sorted by x,
/// starting at x = 0) from 0 to `limit`, normalized by `limit`.
pub fn integrate_to_limit(points: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for pair in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
        }
    }
    area / limit
}

fn check_pro_inputs(set: &ScoredSet, fpr_limit: f64) -> Result<()> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::InvalidArgument(format!("fpr_limit must lie in (0, 1], got {fpr_limit}")));
    }
    set.validate()
}

/// Normalized area under the per-region-overlap curve up to `fpr_limit`.
pub fn aupro(set: &ScoredSet, fpr_limit: f64) -> Result<f64> {
    if set.pixel_count() > EXACT_PIXEL_LIMIT {
        aupro_grid(set, fpr_limit, GRID_THRESHOLDS)
    } else {
        aupro_exact(set, fpr_limit)
    }
}

/// The PRO curve at every distinct score, as `(fpr, pro)` points starting
/// from `(0, 0)`.
pub fn pro_curve(set: &ScoredSet) -> Result<Vec<(f64, f64)>> {
    set.validate()?;
    let (scores, _) = set.pooled();
    let (region_of, sizes) = regions(set);
    let neg = region_of.iter().filter(|r| r.is_none()).count();
    if sizes.is_empty() {
        return Err(Error::InvalidArgument("AU-PRO needs at least one ground-truth region".into()));
    }
    if neg == 0 {
        return Err(Error::InvalidArgument("AU-PRO needs at least one negative pixel".into()));
    }
    let share = 1.0 / sizes.len() as f64;
    let order = descending(&scores);
    let mut fp = 0usize;
    let mut pro = 0.0;
    let mut points = vec![(0.0, 0.0)];
    for_each_tie_group(&scores, &order, |group| {
        for &i in group {
            match region_of[i] {
                None => fp += 1,
                Some(r) => pro += share / sizes[r] as f64,
            }
        }
        points.push((fp as f64 / neg as f64, pro.min(1.0)));
    });
    Ok(points)
}

pub fn aupro_exact(set: &ScoredSet, fpr_limit: f64) -> Result<f64> {
    check_pro_inputs(set, fpr_limit)?;
    Ok(integrate_to_limit(&pro_curve(set)?, fpr_limit))
}

/// AU-PRO on `n_thresholds` equally spaced thresholds spanning the score
/// range, both endpoints included.
pub fn aupro_grid(set: &ScoredSet, fpr_limit: f64, n_thresholds: usize) -> Result<f64> {
    check_pro_inputs(set, fpr_limit)?;
    if n_thresholds < 2 {
        return Err(Error::InvalidArgument("threshold grid needs at least two points".into()));
    }
    let (scores, _) = set.pooled();
    let (region_of, sizes) = regions(set);
    let neg = region_of.iter().filter(|r| r.is_none()).count();
    if sizes.is_empty() || neg == 0 {
        return Err(Error::InvalidArgument(
            "AU-PRO needs a ground-truth region and a negative pixel".into(),
        ));
    }
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let step = (hi - lo) / (n_thresholds - 1) as f64;
    // first grid index (thresholds descending) at which the pixel is positive
    let first_index = |s: f64| -> usize {
        if step == 0.0 {
            return 0;
        }
        let mut k = ((hi - s) / step).ceil().max(0.0) as usize;
        k = k.min(n_thresholds - 1);
        while k > 0 && hi - (k - 1) as f64 * step <= s {
            k -= 1;
        }
        while hi - k as f64 * step > s && k + 1 < n_thresholds {
            k += 1;
        }
        k
    };
    let mut neg_at = vec![0usize; n_thresholds];
    let mut pos_at: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); n_thresholds];
    for (i, &s) in scores.iter().enumerate() {
        let k = first_index(s);
        match region_of[i] {
            None => neg_at[k] += 1,
            Some(r) => *pos_at[k].entry(r).or_default() += 1,
        }
    }
    let share = 1.0 / sizes.len() as f64;
    let mut covered = vec![0usize; sizes.len()];
    let mut fp = 0;
    let mut points = vec![(0.0, 0.0)];
    for k in 0..n_thresholds {
        fp += neg_at[k];
        for (&r, &c) in &pos_at[k] {
            covered[r] += c;
        }
        let pro = covered
            .iter()
            .zip(&sizes)
            .map(|(&c, &s)| c as f64 / s as f64)
            .sum::<f64>()
            * share;
        points.push((fp as f64 / neg as f64, pro));
    }
    Ok(integrate_to_limit(&points, fpr_limit))
}

/// Summary of the normal and abnormal discrepancy distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DDStats {
    pub mu_n: f64,
    pub mu_a: f64,
    pub margin: f64,
    pub overlap: f64,
    /// Shared bin edges, `n_bins + 1` values.
    pub edges: Vec<f64>,
    /// Densities (integrate to one over the edges).
    pub hist_n: Vec<f64>,
    pub hist_a: Vec<f64>,
}

pub fn dd_stats(d_normal: &[f64], d_abnormal: &[f64], n_bins: usize) -> Result<DDStats> {
    if d_normal.is_empty() {
        return Err(Error::EmptyInput("normal discrepancies"));
    }
    if d_abnormal.is_empty() {
        return Err(Error::EmptyInput("abnormal discrepancies"));
    }
    if n_bins == 0 {
        return Err(Error::InvalidArgument("n_bins must be positive".into()));
    }
    let all = d_normal.iter().chain(d_abnormal);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / n_bins as f64 } else { 1.0 };
    let edges = (0..=n_bins).map(|i| lo + i as f64 * width).collect();
    let histogram = |values: &[f64]| {
        let mut counts = vec![0usize; n_bins];
        for &v in values {
            let b = (((v - lo) / width) as usize).min(n_bins - 1);
            counts[b] += 1;
        }
        counts
            .into_iter()
            .map(|c| c as f64 / (values.len() as f64 * width))
            .collect::<Vec<_>>()
    };
    let hist_n = histogram(d_normal);
    let hist_a = histogram(d_abnormal);
    let overlap = hist_n
        .iter()
        .zip(&hist_a)
        .map(|(a, b)| a.min(*b) * width)
        .sum::<f64>()
        .clamp(0.0, 1.0);
    let mu_n = d_normal.iter().sum::<f64>() / d_normal.len() as f64;
    let mu_a = d_abnormal.iter().sum::<f64>() / d_abnormal.len() as f64;
    Ok(DDStats {
        mu_n,
        mu_a,
        margin: (mu_a - mu_n).abs(),
        overlap,
        edges,
        hist_n,
        hist_a,
    })
}

/// Splits a scored set into its normal and abnormal pixel scores.
pub fn split_scores(set: &ScoredSet) -> (Vec<f64>, Vec<f64>) {
    let (scores, labels) = set.pooled();
    let mut normal = Vec::new();
    let mut abnormal = Vec::new();
    for (s, l) in scores.into_iter().zip(labels) {
        if l {
            abnormal.push(s);
        } else {
            normal.push(s);
        }
    }
    (normal, abnormal)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub auroc: f64,
    pub aupro: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetrics {
    pub epoch: usize,
    pub auroc: f64,
    pub aupro: f64,
    pub margin: f64,
    pub overlap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub mean: MetricPair,
    pub std: MetricPair,
}

/// Evaluation summary over the retained checkpoints. Metric values are
/// fractions in `[0, 1]`; `std` is the population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auroc: f64,
    pub aupro: f64,
    pub per_category: BTreeMap<String, CategoryMetrics>,
    pub mean: MetricPair,
    pub std: MetricPair,
    pub config_hash: String,
    pub fpr_limit: f64,
    pub k: usize,
    pub partial: bool,
    pub per_checkpoint: Vec<CheckpointMetrics>,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricsReport {
    pub fn from_checkpoints(
        category: &str,
        per_checkpoint: Vec<CheckpointMetrics>,
        k: usize,
        config_hash: String,
        fpr_limit: f64,
    ) -> Self {
        let (auroc_m, auroc_s) = mean_std(&per_checkpoint.iter().map(|c| c.auroc).collect::<Vec<_>>());
        let (aupro_m, aupro_s) = mean_std(&per_checkpoint.iter().map(|c| c.aupro).collect::<Vec<_>>());
        let mean = MetricPair {
            auroc: auroc_m,
            aupro: aupro_m,
        };
        let std = MetricPair {
            auroc: auroc_s,
            aupro: aupro_s,
        };
        MetricsReport {
            auroc: auroc_m,
            aupro: aupro_m,
            per_category: BTreeMap::from([(category.to_string(), CategoryMetrics { mean, std })]),
            mean,
            std,
            config_hash,
            fpr_limit,
            k,
            partial: per_checkpoint.len() < k,
            per_checkpoint,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn auroc_perfect_and_inverted() {
        let mask = array![[0u8, 1], [1, 0]];
        let perfect = ScoredSet::new(vec![mask.mapv(|v| v as f32)], vec![mask.clone()]).unwrap();
        assert_eq!(auroc_pixel(&perfect).unwrap(), 1.0);
        let inverted = ScoredSet::new(vec![mask.mapv(|v| 1.0 - v as f32)], vec![mask.clone()]).unwrap();
        assert_eq!(auroc_pixel(&inverted).unwrap(), 0.0);
        let flat = ScoredSet::new(vec![Array2::zeros((2, 2))], vec![mask]).unwrap();
        assert_eq!(auroc_pixel(&flat).unwrap(), 0.5);
    }

    #[test]
    fn auroc_single_class_is_an_error() {
        let set = ScoredSet::new(vec![Array2::zeros((2, 2))], vec![Array2::zeros((2, 2))]).unwrap();
        assert!(auroc_pixel(&set).is_err());
    }

    #[test]
    fn aupro_perfect_is_one() {
        let mask = array![[0u8, 1, 0], [0, 1, 0], [0, 0, 1]];
        let set = ScoredSet::new(vec![mask.mapv(|v| v as f32)], vec![mask]).unwrap();
        assert!((aupro(&set, 0.3).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aupro_rejects_bad_limit() {
        let mask = array![[0u8, 1]];
        let set = ScoredSet::new(vec![mask.mapv(|v| v as f32)], vec![mask]).unwrap();
        assert!(aupro(&set, 0.0).is_err());
        assert!(aupro(&set, 1.5).is_err());
        assert!(aupro(&set, 1.0).is_ok());
    }

    #[test]
    fn diagonal_pixels_form_one_region() {
        let mask = array![[1u8, 0, 0], [0, 1, 0], [0, 0, 0], [1, 1, 0]];
        let (labels, n) = label_regions(&mask);
        assert_eq!(n, 2);
        assert_eq!(labels[[0, 0]], labels[[1, 1]]);
        assert_ne!(labels[[0, 0]], labels[[3, 0]]);
    }

    #[test]
    fn u_shape_merges_late() {
        let mask = array![[1u8, 0, 1], [1, 0, 1], [1, 1, 1]];
        assert_eq!(label_regions(&mask).1, 1);
    }

    #[test]
    fn dd_stats_trivial_cases() {
        let a = [0.1, 0.2, 0.3, 0.4];
        let s = dd_stats(&a, &a, 10).unwrap();
        assert_eq!(s.margin, 0.0);
        assert!((s.overlap - 1.0).abs() < 1e-12);
        let s = dd_stats(&[0.0, 0.1], &[5.0, 5.1], 10).unwrap();
        assert_eq!(s.overlap, 0.0);
        assert!((s.margin - 5.0).abs() < 1e-12);
        assert!(dd_stats(&[], &a, 10).is_err());
    }

    #[test]
    fn last_k_summary() {
        let ck = |auroc, aupro| CheckpointMetrics {
            epoch: 0,
            auroc,
            aupro,
            margin: 0.0,
            overlap: 0.0,
        };
        let r = MetricsReport::from_checkpoints("c", vec![ck(0.9, 0.8)], 1, String::new(), 0.3);
        assert_eq!(r.std.auroc, 0.0);
        assert!(!r.partial);
        let r = MetricsReport::from_checkpoints("c", vec![ck(0.9, 0.8), ck(0.7, 0.6)], 5, String::new(), 0.3);
        assert!(r.partial);
        assert!((r.mean.auroc - 0.8).abs() < 1e-12);
        assert!((r.std.aupro - 0.1).abs() < 1e-12);
    }
}
