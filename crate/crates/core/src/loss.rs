//! Training objectives over a pooled batch of discrepancies.
//!
//! `d_n` are discrepancies at unperturbed (normal) feature cells and `d_s`
//! at synthetic-abnormal cells. The scalar functions here work in f64 and
//! serve both as the reference implementation and as the source of the
//! per-entry coefficients used by the trainer: every mode is linear in the
//! discrepancies once the focal weights are frozen, so the training loss is
//! `sum(coef * d)` with `coef` computed on the host.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_GAMMA: f64 = 2.0;
pub const DEFAULT_EPS: f64 = 1e-6;

static NO_ABNORMAL_BATCHES: AtomicU64 = AtomicU64::new(0);

/// Number of loss evaluations that had no synthetic-abnormal cells and fell
/// back to the normal-only objective.
pub fn no_abnormal_batches() -> u64 {
    NO_ABNORMAL_BATCHES.load(Ordering::Relaxed)
}

fn note_no_abnormal() {
    let n = NO_ABNORMAL_BATCHES.fetch_add(1, Ordering::Relaxed) + 1;
    log::warn!("batch without synthetic-abnormal cells, using the normal-only loss ({n} so far)");
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DDBatch {
    pub d_n: Vec<f64>,
    pub d_s: Vec<f64>,
}

impl DDBatch {
    pub fn new(d_n: Vec<f64>, d_s: Vec<f64>) -> Self {
        DDBatch { d_n, d_s }
    }

    /// Splits a flat discrepancy vector by its abnormal flags.
    pub fn from_flat(d: &[f64], abnormal: &[bool]) -> Self {
        let mut out = DDBatch::default();
        for (&v, &s) in d.iter().zip(abnormal) {
            if s {
                out.d_s.push(v);
            } else {
                out.d_n.push(v);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_n.is_empty() {
            return Err(Error::EmptyInput("normal discrepancies"));
        }
        if self.d_n.iter().chain(&self.d_s).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "discrepancies must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn mu_n(&self) -> f64 {
        mean(&self.d_n)
    }

    /// `NaN` when there are no abnormal cells.
    pub fn mu_s(&self) -> f64 {
        mean(&self.d_s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightBatch {
    pub w_n: Vec<f64>,
    pub w_s: Vec<f64>,
    pub gamma: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn baseline_loss(d_n: &[f64]) -> Result<f64> {
    if d_n.is_empty() {
        return Err(Error::EmptyInput("normal discrepancies"));
    }
    Ok(mean(d_n))
}

pub fn mom_loss(d_n: &[f64], d_s: &[f64]) -> Result<f64> {
    if d_n.is_empty() {
        return Err(Error::EmptyInput("normal discrepancies"));
    }
    if d_s.is_empty() {
        note_no_abnormal();
        return baseline_loss(d_n);
    }
    let total = (d_n.len() + d_s.len()) as f64;
    Ok((d_n.iter().sum::<f64>() - d_s.iter().sum::<f64>()) / total)
}

/// Focal weights: normals far above their mean and abnormals far below
/// theirs get weights above one.
pub fn oom_weights(d_n: &[f64], d_s: &[f64], gamma: f64, eps: f64) -> Result<WeightBatch> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!("gamma must be >= 0, got {gamma}")));
    }
    let w_n = if d_n.is_empty() {
        Vec::new()
    } else {
        let mu = mean(d_n).max(eps);
        d_n.iter().map(|&d| (d / mu).powf(gamma)).collect()
    };
    let w_s = if d_s.is_empty() {
        Vec::new()
    } else {
        let mu = mean(d_s).max(eps);
        d_s.iter().map(|&d| (d.max(eps) / mu).powf(-gamma)).collect()
    };
    Ok(WeightBatch { w_n, w_s, gamma })
}

pub fn cdo_loss(d_n: &[f64], d_s: &[f64], gamma: f64) -> Result<f64> {
    cdo_loss_with(d_n, d_s, gamma, DEFAULT_EPS)
}

pub fn cdo_loss_with(d_n: &[f64], d_s: &[f64], gamma: f64, eps: f64) -> Result<f64> {
    if d_n.is_empty() {
        return Err(Error::EmptyInput("normal discrepancies"));
    }
    if d_s.is_empty() {
        note_no_abnormal();
        return baseline_loss(d_n);
    }
    let w = oom_weights(d_n, d_s, gamma, eps)?;
    Ok(weighted(d_n, &w.w_n, d_s, &w.w_s))
}

fn weighted(d_n: &[f64], w_n: &[f64], d_s: &[f64], w_s: &[f64]) -> f64 {
    let num_n: f64 = w_n.iter().zip(d_n).map(|(w, d)| w * d).sum();
    let num_s: f64 = w_s.iter().zip(d_s).map(|(w, d)| w * d).sum();
    (num_n - num_s) / (w_n.iter().sum::<f64>() + w_s.iter().sum::<f64>())
}

/// Gradient of [`cdo_loss_with`] with the weights held constant.
pub fn cdo_loss_grad(d_n: &[f64], d_s: &[f64], gamma: f64, eps: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let c = coefficients(LossMode::MomOom, &DDBatch::new(d_n.to_vec(), d_s.to_vec()), gamma, eps)?;
    Ok((c.d_n, c.d_s))
}

/// The four objectives of the ablation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Mean normal discrepancy.
    Baseline,
    /// Focal-weighted mean normal discrepancy.
    BaselineOom,
    /// Normal minus synthetic-abnormal discrepancy.
    Mom,
    /// Focal-weighted margin objective.
    #[default]
    MomOom,
}

impl LossMode {
    pub const ALL: [LossMode; 4] = [LossMode::Baseline, LossMode::BaselineOom, LossMode::Mom, LossMode::MomOom];

    /// Short label used in tables: 1..=4.
    pub fn case_number(self) -> usize {
        match self {
            LossMode::Baseline => 1,
            LossMode::BaselineOom => 2,
            LossMode::Mom => 3,
            LossMode::MomOom => 4,
        }
    }

    pub fn uses_abnormal(self) -> bool {
        matches!(self, LossMode::Mom | LossMode::MomOom)
    }

    pub fn uses_weights(self) -> bool {
        matches!(self, LossMode::BaselineOom | LossMode::MomOom)
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" | "1" => Ok(LossMode::Baseline),
            "baseline_oom" | "2" => Ok(LossMode::BaselineOom),
            "mom" | "3" => Ok(LossMode::Mom),
            "mom_oom" | "4" => Ok(LossMode::MomOom),
            _ => Err(Error::invalid_config("loss_mode", "baseline, baseline_oom, mom or mom_oom")),
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMode::Baseline => "baseline",
            LossMode::BaselineOom => "baseline_oom",
            LossMode::Mom => "mom",
            LossMode::MomOom => "mom_oom",
        })
    }
}

/// Per-entry loss coefficients: the loss equals
/// `sum(c.d_n[i] * d_n[i]) + sum(c.d_s[j] * d_s[j])`, which is also its
/// gradient with the weights frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub d_n: Vec<f64>,
    pub d_s: Vec<f64>,
}

impl Coefficients {
    pub fn apply(&self, batch: &DDBatch) -> f64 {
        let n: f64 = self.d_n.iter().zip(&batch.d_n).map(|(c, d)| c * d).sum();
        let s: f64 = self.d_s.iter().zip(&batch.d_s).map(|(c, d)| c * d).sum();
        n + s
    }
}

pub fn coefficients(mode: LossMode, batch: &DDBatch, gamma: f64, eps: f64) -> Result<Coefficients> {
    if batch.d_n.is_empty() {
        return Err(Error::EmptyInput("normal discrepancies"));
    }
    let n_n = batch.d_n.len();
    let n_s = batch.d_s.len();
    let normal_only = !mode.uses_abnormal() || n_s == 0;
    if mode.uses_abnormal() && n_s == 0 {
        note_no_abnormal();
    }
    if normal_only {
        let d_n = if mode == LossMode::BaselineOom {
            let w = oom_weights(&batch.d_n, &[], gamma, eps)?.w_n;
            let total: f64 = w.iter().sum();
            if total > 0.0 {
                w.into_iter().map(|w| w / total).collect()
            } else {
                // every discrepancy is zero
                vec![1.0 / n_n as f64; n_n]
            }
        } else {
            vec![1.0 / n_n as f64; n_n]
        };
        return Ok(Coefficients {
            d_n,
            d_s: vec![0.0; n_s],
        });
    }
    if mode == LossMode::Mom {
        let c = 1.0 / (n_n + n_s) as f64;
        return Ok(Coefficients {
            d_n: vec![c; n_n],
            d_s: vec![-c; n_s],
        });
    }
    let w = oom_weights(&batch.d_n, &batch.d_s, gamma, eps)?;
    let total = w.w_n.iter().sum::<f64>() + w.w_s.iter().sum::<f64>();
    Ok(Coefficients {
        d_n: w.w_n.iter().map(|w| w / total).collect(),
        d_s: w.w_s.iter().map(|w| -w / total).collect(),
    })
}

/// How focal-weight means are pooled when several hierarchies contribute.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightPooling {
    /// One set of means over every level and image of the batch.
    #[default]
    Pooled,
    /// Means and loss per level; the level losses are averaged.
    PerHierarchy,
}

/// Coefficients for a flat discrepancy vector made of consecutive level
/// ranges, in the same order as `d`.
pub fn flat_coefficients(
    mode: LossMode,
    pooling: WeightPooling,
    d: &[f64],
    abnormal: &[bool],
    level_ranges: &[std::ops::Range<usize>],
    gamma: f64,
    eps: f64,
) -> Result<Vec<f64>> {
    let groups: Vec<std::ops::Range<usize>> = match pooling {
        WeightPooling::Pooled => vec![0..d.len()],
        WeightPooling::PerHierarchy => level_ranges.to_vec(),
    };
    let scale = 1.0 / groups.len() as f64;
    let mut out = vec![0.0; d.len()];
    for g in groups {
        let batch = DDBatch::from_flat(&d[g.clone()], &abnormal[g.clone()]);
        let c = coefficients(mode, &batch, gamma, eps)?;
        let (mut i_n, mut i_s) = (0, 0);
        for (slot, &s) in out[g.clone()].iter_mut().zip(&abnormal[g]) {
            if s {
                *slot = c.d_s[i_s] * scale;
                i_s += 1;
            } else {
                *slot = c.d_n[i_n] * scale;
                i_n += 1;
            }
        }
    }
    Ok(out)
}

/// Scalar loss of `mode` on `batch`.
pub fn loss(mode: LossMode, batch: &DDBatch, gamma: f64, eps: f64) -> Result<f64> {
    match mode {
        LossMode::Baseline => baseline_loss(&batch.d_n),
        LossMode::Mom => mom_loss(&batch.d_n, &batch.d_s),
        LossMode::MomOom => cdo_loss_with(&batch.d_n, &batch.d_s, gamma, eps),
        LossMode::BaselineOom => Ok(coefficients(mode, batch, gamma, eps)?.apply(batch)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_examples() {
        assert_eq!(baseline_loss(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(baseline_loss(&[0.7, 0.7]).unwrap(), 0.7);
        assert!(baseline_loss(&[]).is_err());
    }

    #[test]
    fn mom_examples() {
        assert_eq!(mom_loss(&[0.3, 1.2], &[0.3, 1.2]).unwrap(), 0.0);
        assert_eq!(mom_loss(&[0.0, 0.0], &[4.0, 4.0]).unwrap(), -2.0);
    }

    #[test]
    fn mom_without_abnormals_falls_back_and_counts() {
        let before = no_abnormal_batches();
        assert_eq!(mom_loss(&[1.0, 3.0], &[]).unwrap(), 2.0);
        assert!(no_abnormal_batches() > before);
    }

    #[test]
    fn weight_examples() {
        let w = oom_weights(&[1.0, 3.0], &[1.0, 3.0], 0.0, DEFAULT_EPS).unwrap();
        assert!(w.w_n.iter().chain(&w.w_s).all(|&v| v == 1.0));
        // mean 2: entry 4 is twice the mean
        let w = oom_weights(&[0.0, 4.0], &[0.0, 4.0], 2.0, DEFAULT_EPS).unwrap();
        assert!((w.w_n[1] - 4.0).abs() < 1e-12);
        assert!((w.w_s[1] - 0.25).abs() < 1e-12);
        let w = oom_weights(&[2.0, 2.0], &[], 3.0, DEFAULT_EPS).unwrap();
        assert_eq!(w.w_n, vec![1.0, 1.0]);
    }

    #[test]
    fn zero_abnormal_discrepancy_stays_finite() {
        let w = oom_weights(&[1.0], &[0.0, 1.0], 2.0, DEFAULT_EPS).unwrap();
        assert!(w.w_s.iter().all(|v| v.is_finite()));
        assert!(cdo_loss(&[1.0], &[0.0, 1.0], 2.0).unwrap().is_finite());
    }

    #[test]
    fn cdo_reduces_to_mom() {
        let d_n = [0.1, 0.5, 0.9];
        let d_s = [1.5, 0.2];
        assert_eq!(cdo_loss(&d_n, &d_s, 0.0).unwrap(), mom_loss(&d_n, &d_s).unwrap());
        let flat_n = [0.4; 3];
        let flat_s = [1.1; 2];
        assert!((cdo_loss(&flat_n, &flat_s, 2.0).unwrap() - mom_loss(&flat_n, &flat_s).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn coefficients_reproduce_every_loss() {
        let batch = DDBatch::new(vec![0.1, 0.5, 0.9, 0.2], vec![1.5, 0.2, 0.8]);
        for mode in LossMode::ALL {
            let c = coefficients(mode, &batch, 2.0, DEFAULT_EPS).unwrap();
            let direct = loss(mode, &batch, 2.0, DEFAULT_EPS).unwrap();
            assert!((c.apply(&batch) - direct).abs() < 1e-12, "{mode}");
        }
    }

    #[test]
    fn per_hierarchy_pooling_averages_level_losses() {
        let d = [0.1, 0.9, 1.2, 0.3, 0.4, 2.0];
        let s = [false, false, true, false, false, true];
        let ranges = [0..3, 3..6];
        let c = flat_coefficients(LossMode::MomOom, WeightPooling::PerHierarchy, &d, &s, &ranges, 2.0, DEFAULT_EPS)
            .unwrap();
        let total: f64 = c.iter().zip(&d).map(|(c, d)| c * d).sum();
        let l1 = cdo_loss(&[0.1, 0.9], &[1.2], 2.0).unwrap();
        let l2 = cdo_loss(&[0.3, 0.4], &[2.0], 2.0).unwrap();
        assert!((total - (l1 + l2) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn loss_mode_names_round_trip() {
        for mode in LossMode::ALL {
            assert_eq!(mode.to_string().parse::<LossMode>().unwrap(), mode);
            assert_eq!(mode.case_number().to_string().parse::<LossMode>().unwrap(), mode);
        }
    }
}
