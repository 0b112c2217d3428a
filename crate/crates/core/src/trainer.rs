//! Training of the apprentice against the frozen expert, and evaluation of
//! the retained checkpoints.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, preprocess, DatasetSpec, Label, Prepared, Sample, Split, ToyCounts};
use crate::error::{Error, Result};
use crate::features::{
    discrepancy, normalize_features, ApprenticeModel, BackboneId, Checkpoint, DiscrepancyMode, ExpertModel,
};
use crate::loss::{self, DDBatch, LossMode, WeightPooling};
use crate::metrics::{self, CheckpointMetrics, MetricsReport, ScoredSet};
use crate::perturbation::{perturb, PerturbationConfig, PerturbationOutcome};
use crate::rng;
use crate::scoring::{self, image_batch, ScoringConfig};

/// Environment variable naming the MVTec-layout dataset root.
pub const DATA_ROOT_ENV: &str = "CDO_DATA_ROOT";

const SHUFFLE_STREAM: u16 = 10;
const PERTURB_STREAM: u16 = 11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    /// Procedural textures; see [`dataset::generate_toy_dataset`].
    Toy {
        #[serde(default)]
        seed: u64,
        n_train: usize,
        n_test_normal: usize,
        n_test_abnormal: usize,
    },
    /// One MVTec-layout category. `root` falls back to `$CDO_DATA_ROOT`.
    Mvtec {
        #[serde(default)]
        root: Option<PathBuf>,
        category: String,
    },
}

impl DataConfig {
    pub fn category(&self) -> &str {
        match self {
            DataConfig::Toy { .. } => "toy",
            DataConfig::Mvtec { category, .. } => category,
        }
    }

    pub fn root(&self) -> Result<PathBuf> {
        match self {
            DataConfig::Toy { .. } => Ok(PathBuf::new()),
            DataConfig::Mvtec { root: Some(r), .. } => Ok(r.clone()),
            DataConfig::Mvtec { root: None, .. } => std::env::var_os(DATA_ROOT_ENV)
                .map(PathBuf::from)
                .ok_or_else(|| Error::invalid_config("data.root", format!("a path, or ${DATA_ROOT_ENV} set"))),
        }
    }

    /// Train and test samples.
    pub fn load(&self, resolution: usize) -> Result<(Vec<Sample>, Vec<Sample>)> {
        match self {
            DataConfig::Toy {
                seed,
                n_train,
                n_test_normal,
                n_test_abnormal,
            } => {
                let all = dataset::toy_dataset(
                    *seed,
                    ToyCounts {
                        n_train: *n_train,
                        n_test_normal: *n_test_normal,
                        n_test_abnormal: *n_test_abnormal,
                    },
                    resolution,
                );
                Ok(all.into_iter().partition(|s| s.split == Split::Train))
            }
            DataConfig::Mvtec { category, .. } => {
                let spec = DatasetSpec::new(self.root()?, category.clone(), resolution);
                Ok((
                    dataset::load_mvtec_category(&spec, Split::Train)?,
                    dataset::load_mvtec_category(&spec, Split::Test)?,
                ))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Number of trailing epoch checkpoints averaged.
    pub k: usize,
    pub fpr_limit: f64,
    pub batch_size: usize,
    pub blur_sigma: Option<f32>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: 5,
            fpr_limit: metrics::DEFAULT_FPR_LIMIT,
            batch_size: 8,
            blur_sigma: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneId,
    pub resolution: usize,
    pub hierarchies: Vec<usize>,
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub discrepancy: DiscrepancyMode,
    pub weight_pooling: WeightPooling,
    pub eps: f64,
    /// Epoch checkpoints retained besides the final one.
    pub keep_last: usize,
    pub weights_dir: Option<PathBuf>,
    pub perturbation: PerturbationConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backbone: BackboneId::Hr32,
            resolution: 256,
            hierarchies: vec![1, 2, 3],
            gamma: loss::DEFAULT_GAMMA,
            epochs: 50,
            batch_size: 8,
            learning_rate: 2e-4,
            weight_decay: 1e-2,
            seed: 0,
            loss_mode: LossMode::MomOom,
            discrepancy: DiscrepancyMode::Squared,
            weight_pooling: WeightPooling::Pooled,
            eps: loss::DEFAULT_EPS,
            keep_last: 5,
            weights_dir: None,
            perturbation: PerturbationConfig::default(),
            data: DataConfig::Mvtec {
                root: None,
                category: "leather".into(),
            },
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Desk-scale setup on procedural textures with the toy backbone.
    pub fn toy() -> Self {
        RunConfig {
            backbone: BackboneId::Toy,
            resolution: 64,
            epochs: 50,
            learning_rate: 1e-3,
            data: DataConfig::Toy {
                seed: 0,
                n_train: 48,
                n_test_normal: 8,
                n_test_abnormal: 16,
            },
            ..RunConfig::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml_str(&text).map_err(|e| match e {
            Error::ConfigParse(msg) => Error::ConfigParse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        crate::digest::sha256_hex(&serde_json::to_vec(self).expect("run config serializes"))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid_config(field, "a positive real"))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        positive("eps", self.eps)?;
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid_config("gamma", "a real >= 0"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid_config("weight_decay", "a real >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid_config("batch_size", "a positive integer"));
        }
        if self.keep_last == 0 {
            return Err(Error::invalid_config("keep_last", "a positive integer"));
        }
        if self.eval.k == 0 || self.eval.batch_size == 0 {
            return Err(Error::invalid_config("eval", "positive k and batch_size"));
        }
        if !(self.eval.fpr_limit > 0.0 && self.eval.fpr_limit <= 1.0) {
            return Err(Error::invalid_config("eval.fpr_limit", "a real in (0, 1]"));
        }
        match self.backbone {
            BackboneId::Toy => {
                if self.resolution < 32 || self.resolution % 8 != 0 {
                    return Err(Error::invalid_config("resolution", "a multiple of 8, at least 32"));
                }
            }
            _ => {
                if self.resolution != 256 && self.resolution != 512 {
                    return Err(Error::invalid_config("resolution", "256 or 512"));
                }
            }
        }
        self.backbone.validate_hierarchies(&self.hierarchies)?;
        self.perturbation.validate()?;
        if let DataConfig::Mvtec { category, .. } = &self.data {
            if category.is_empty() {
                return Err(Error::invalid_config("data.category", "a category name"));
            }
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec::new(
            self.data.root().unwrap_or_default(),
            self.data.category().to_string(),
            self.resolution,
        )
    }

    pub fn expert(&self, device: &Device) -> Result<ExpertModel> {
        ExpertModel::pretrained(self.backbone, &self.hierarchies, self.weights_dir.as_deref(), device)
    }

    pub fn scoring(&self) -> ScoringConfig {
        ScoringConfig {
            discrepancy: self.discrepancy,
            blur_sigma: self.eval.blur_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mu_n: f64,
    pub mu_s: f64,
    pub loss: f64,
    pub wall_time: f64,
}

pub fn write_epoch_log(logs: &[EpochLog], path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    if logs.is_empty() {
        wtr.write_record(["epoch", "mu_n", "mu_s", "loss", "wall_time"])?;
    }
    for log in logs {
        wtr.serialize(log)?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_epoch_log(path: &Path) -> Result<Vec<EpochLog>> {
    let mut rdr = csv::Reader::from_path(path)?;
    Ok(rdr.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Hooks into a training run.
pub trait TrainObserver {
    fn perturbed(&mut self, _epoch: usize, _batch: &[&Prepared], _outcomes: &[PerturbationOutcome]) -> Result<()> {
        Ok(())
    }

    fn epoch_end(&mut self, _log: &EpochLog, _checkpoint: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: Checkpoint,
    /// The last `keep_last` epoch checkpoints, oldest first.
    pub epoch_checkpoints: Vec<Checkpoint>,
    pub logs: Vec<EpochLog>,
    pub expert_hash: String,
}

pub fn train(dataset: &[Sample], cfg: &RunConfig) -> Result<TrainOutcome> {
    train_with(dataset, cfg, &mut ())
}

pub fn train_with(dataset: &[Sample], cfg: &RunConfig, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    if let Some(s) = dataset.iter().find(|s| s.label != Label::Normal) {
        return Err(Error::InvalidArgument(format!("training sample {} is not normal", s.id)));
    }
    let device = Device::Cpu;
    let spec = cfg.dataset_spec();
    let prepared: Vec<Prepared> = dataset.iter().map(|s| preprocess(s, &spec)).collect();

    let expert = cfg.expert(&device)?;
    let expert_hash = expert.param_hash()?;
    let apprentice = ApprenticeModel::random(cfg.backbone, &cfg.hierarchies, cfg.seed, &device)?;
    let run_config = serde_json::to_value(cfg)?;
    let checkpoint = |epoch: usize| -> Result<Checkpoint> {
        Ok(Checkpoint {
            backbone: cfg.backbone,
            hierarchies: cfg.hierarchies.clone(),
            resolution: cfg.resolution,
            epoch,
            run_config: run_config.clone(),
            params: apprentice.snapshot()?,
        })
    };

    let mut opt = AdamW::new(
        apprentice.trainable(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
        },
    )?;

    let perturb_seed = cfg.seed ^ cfg.perturbation.seed.rotate_left(32);
    let mut retained: VecDeque<Checkpoint> = VecDeque::new();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut last = checkpoint(0)?;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, rng::stream_id(SHUFFLE_STREAM, epoch as u32, 0)));

        let (mut sum_n, mut sum_s, mut sum_loss) = (0.0, 0.0, 0.0);
        let (mut batches, mut batches_s) = (0usize, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &prepared[i]).collect();
            let outcomes = chunk
                .iter()
                .map(|&i| {
                    let mut g = rng::stream(perturb_seed, rng::stream_id(PERTURB_STREAM, epoch as u32, i as u32));
                    perturb(&prepared[i].image, &cfg.perturbation, &mut g)
                })
                .collect::<Result<Vec<_>>>()?;
            observer.perturbed(epoch, &batch, &outcomes)?;

            let images: Vec<&Array3<f32>> = outcomes.iter().map(|o| &o.image).collect();
            let masks: Vec<Array2<u8>> = outcomes.iter().map(|o| o.mask.clone()).collect();
            let x = image_batch(&images, &device)?;
            let fe = normalize_features(&expert.forward(&x)?)?;
            let fa = normalize_features(&apprentice.forward(&x, true)?)?;
            let field = discrepancy(&fe, &fa, cfg.discrepancy)?.with_partition(&masks)?;
            let (d, abnormal) = field.flatten()?;
            let d_host: Vec<f64> = d.to_vec1::<f32>()?.into_iter().map(f64::from).collect();
            let coef = loss::flat_coefficients(
                cfg.loss_mode,
                cfg.weight_pooling,
                &d_host,
                &abnormal,
                &field.level_ranges(),
                cfg.gamma,
                cfg.eps,
            )?;
            let value: f64 = coef.iter().zip(&d_host).map(|(c, d)| c * d).sum();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            let coef_t = Tensor::from_vec(coef.iter().map(|&c| c as f32).collect::<Vec<_>>(), d.dims(), &device)?;
            let objective = (d * coef_t)?.sum_all()?;
            opt.backward_step(&objective)?;

            let dd = DDBatch::from_flat(&d_host, &abnormal);
            sum_n += dd.mu_n();
            if !dd.d_s.is_empty() {
                sum_s += dd.mu_s();
                batches_s += 1;
            }
            sum_loss += value;
            batches += 1;
        }
        let log = EpochLog {
            epoch,
            mu_n: sum_n / batches as f64,
            mu_s: if batches_s > 0 { sum_s / batches_s as f64 } else { 0.0 },
            loss: sum_loss / batches as f64,
            wall_time: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.5} mu_n {:.5} mu_s {:.5} ({:.2}s)",
            log.loss,
            log.mu_n,
            log.mu_s,
            log.wall_time
        );
        last = checkpoint(epoch)?;
        observer.epoch_end(&log, &last)?;
        logs.push(log);
        retained.push_back(last.clone());
        if retained.len() > cfg.keep_last {
            retained.pop_front();
        }
    }
    if expert.param_hash()? != expert_hash {
        return Err(Error::Checkpoint("expert parameters changed during training".into()));
    }
    Ok(TrainOutcome {
        final_checkpoint: last,
        epoch_checkpoints: retained.into(),
        logs,
        expert_hash,
    })
}

/// Scores of every test image for one apprentice.
pub fn score_test_set(
    test: &[Prepared],
    expert: &ExpertModel,
    apprentice: &ApprenticeModel,
    cfg: &RunConfig,
) -> Result<Vec<scoring::AnomalyMap>> {
    let device = Device::Cpu;
    let mut maps = Vec::with_capacity(test.len());
    for chunk in test.chunks(cfg.eval.batch_size) {
        let refs: Vec<&Prepared> = chunk.iter().collect();
        maps.extend(scoring::anomaly_maps(
            &refs,
            expert,
            apprentice,
            &cfg.hierarchies,
            &cfg.scoring(),
            &device,
        )?);
    }
    Ok(maps)
}

/// Metrics of one checkpoint on a preprocessed test set.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    test: &[Prepared],
    expert: &ExpertModel,
    cfg: &RunConfig,
) -> Result<CheckpointMetrics> {
    let apprentice = ApprenticeModel::from_params(
        checkpoint.backbone,
        &checkpoint.hierarchies,
        checkpoint.params.clone().into_iter().collect(),
        &Device::Cpu,
    )?;
    let maps = score_test_set(test, expert, &apprentice, cfg)?;
    let set = ScoredSet::new(
        maps.into_iter().map(|m| m.scores).collect(),
        test.iter().map(Prepared::mask_or_zeros).collect(),
    )?;
    let (normal, abnormal) = metrics::split_scores(&set);
    let dd = metrics::dd_stats(&normal, &abnormal, metrics::DEFAULT_BINS)?;
    Ok(CheckpointMetrics {
        epoch: checkpoint.epoch,
        auroc: metrics::auroc_pixel(&set)?,
        aupro: metrics::aupro(&set, cfg.eval.fpr_limit)?,
        margin: dd.margin,
        overlap: dd.overlap,
    })
}

/// Evaluates the last `k` checkpoints and reports mean and population
/// standard deviation. With fewer than `k` checkpoints all are used and the
/// report is flagged `partial`.
pub fn evaluate_last_k(checkpoints: &[Checkpoint], test: &[Sample], cfg: &RunConfig, k: usize) -> Result<MetricsReport> {
    if checkpoints.is_empty() {
        return Err(Error::EmptyInput("checkpoints"));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if checkpoints.len() < k {
        log::warn!("only {} checkpoints for a last-{k} evaluation", checkpoints.len());
    }
    let spec = cfg.dataset_spec();
    let test: Vec<Prepared> = test.iter().map(|s| preprocess(s, &spec)).collect();
    let expert = cfg.expert(&Device::Cpu)?;
    let chosen = &checkpoints[checkpoints.len().saturating_sub(k)..];
    let per_checkpoint = chosen
        .iter()
        .map(|c| evaluate_checkpoint(c, &test, &expert, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_checkpoints(
        cfg.data.category(),
        per_checkpoint,
        k,
        cfg.hash(),
        cfg.eval.fpr_limit,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig {
            resolution: 32,
            epochs: 2,
            batch_size: 4,
            data: DataConfig::Toy {
                seed: 1,
                n_train: 6,
                n_test_normal: 2,
                n_test_abnormal: 2,
            },
            ..RunConfig::toy()
        }
    }

    #[test]
    fn zero_epochs_returns_the_initialization() {
        let cfg = RunConfig { epochs: 0, ..tiny() };
        let (train_set, _) = cfg.data.load(cfg.resolution).unwrap();
        let out = train(&train_set, &cfg).unwrap();
        assert!(out.logs.is_empty());
        assert!(out.epoch_checkpoints.is_empty());
        let init = ApprenticeModel::random(cfg.backbone, &cfg.hierarchies, cfg.seed, &Device::Cpu).unwrap();
        let restored = ApprenticeModel::from_params(
            cfg.backbone,
            &cfg.hierarchies,
            out.final_checkpoint.params.into_iter().collect(),
            &Device::Cpu,
        )
        .unwrap();
        assert_eq!(init.param_hash().unwrap(), restored.param_hash().unwrap());
    }

    #[test]
    fn empty_or_abnormal_training_sets_are_rejected() {
        let cfg = tiny();
        assert!(matches!(train(&[], &cfg), Err(Error::EmptyInput(_))));
        let (_, test) = cfg.data.load(cfg.resolution).unwrap();
        assert!(train(&test, &cfg).is_err());
    }

    #[test]
    fn retains_at_most_keep_last_checkpoints() {
        let cfg = RunConfig {
            epochs: 3,
            keep_last: 2,
            ..tiny()
        };
        let (train_set, _) = cfg.data.load(cfg.resolution).unwrap();
        let out = train(&train_set, &cfg).unwrap();
        assert_eq!(out.logs.len(), 3);
        let epochs: Vec<usize> = out.epoch_checkpoints.iter().map(|c| c.epoch).collect();
        assert_eq!(epochs, vec![2, 3]);
        assert_eq!(out.final_checkpoint.epoch, 3);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = RunConfig::toy();
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(cfg.hash(), RunConfig::toy().hash());
    }

    #[test]
    fn invalid_fields_are_named() {
        let err = RunConfig::from_toml_str("epochs = \"many\"").unwrap_err().to_string();
        assert!(err.contains("epochs"), "{err}");
        let err = RunConfig::from_toml_str("learning_rate = -1.0").unwrap_err().to_string();
        assert!(err.contains("learning_rate") && err.contains("positive"), "{err}");
        let err = RunConfig::from_toml_str("backbone = \"res18\"\nresolution = 300").unwrap_err().to_string();
        assert!(err.contains("resolution"), "{err}");
    }
}
