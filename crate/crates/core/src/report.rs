//! Command implementations behind the `cdo` binary: run directories,
//! evaluation reports, inference, sweeps and benchmarks.
//!
//! A run directory holds everything needed to reproduce a result:
//!
//! ```text
//! <run>/config.toml            resolved configuration
//! <run>/epoch_log.csv          epoch, mu_n, mu_s, loss, wall_time
//! <run>/checkpoints/epoch_NNNN.safetensors   last `keep_last` epochs
//! <run>/checkpoints/final.safetensors
//! <run>/metrics.json           written by eval
//! <run>/report/                histogram, curves and heatmap triptychs
//! ```

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Device;
use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::dataset::{self, preprocess, Label, Prepared, Sample, Split};
use crate::error::{Error, Result};
use crate::features::{ApprenticeModel, BackboneId, Checkpoint};
use crate::metrics::{self, DDStats, MetricsReport, ScoredSet};
use crate::perturbation::PerturbationOutcome;
use crate::scoring::{self, AnomalyMap};
use crate::trainer::{self, DataConfig, EpochLog, RunConfig, TrainObserver};

pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "epoch_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.safetensors";
pub const METRICS_FILE: &str = "metrics.json";
pub const REPORT_DIR: &str = "report";

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads the resolved configuration of a run.
pub fn load_run_config(run_dir: &Path) -> Result<RunConfig> {
    RunConfig::from_file(&run_dir.join(CONFIG_FILE))
}

/// Epoch checkpoints of a run, oldest first.
pub fn epoch_checkpoint_paths(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let dir = run_dir.join(CHECKPOINT_DIR);
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("epoch_") && n.ends_with(".safetensors"))
        })
        .collect();
    paths.sort();
    Ok(paths)
}

/// The final checkpoint, falling back to the newest epoch checkpoint.
pub fn final_checkpoint_path(run_dir: &Path) -> Result<PathBuf> {
    let fin = run_dir.join(CHECKPOINT_DIR).join(FINAL_CHECKPOINT);
    if fin.is_file() {
        return Ok(fin);
    }
    epoch_checkpoint_paths(run_dir)?
        .pop()
        .ok_or_else(|| Error::Checkpoint(format!("no checkpoint in {}", run_dir.display())))
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Exact directory to write; otherwise a timestamped one under `runs_root`.
    pub run_dir: Option<PathBuf>,
    pub runs_root: PathBuf,
    /// Writes the perturbed inputs and masks of the first epoch.
    pub dump_perturbations: bool,
}

fn timestamped_dir(root: &Path, cfg: &RunConfig) -> PathBuf {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S%.3f");
    let base = format!("{}-{}-s{}-{stamp}", cfg.data.category(), cfg.loss_mode, cfg.seed);
    let mut dir = root.join(&base);
    let mut n = 1;
    while dir.exists() {
        dir = root.join(format!("{base}-{n}"));
        n += 1;
    }
    dir
}

struct RunWriter {
    checkpoints: PathBuf,
    keep_last: usize,
    written: VecDeque<PathBuf>,
    dump: Option<(PathBuf, dataset::DatasetSpec)>,
}

impl TrainObserver for RunWriter {
    fn perturbed(&mut self, epoch: usize, batch: &[&Prepared], outcomes: &[PerturbationOutcome]) -> Result<()> {
        let Some((dir, spec)) = &self.dump else {
            return Ok(());
        };
        if epoch != 1 {
            return Ok(());
        }
        for (p, o) in batch.iter().zip(outcomes) {
            let stem = p.id.replace('/', "_");
            dataset::write_rgb_png(&dataset::denormalize(&o.image, spec), &dir.join(format!("{stem}.png")))?;
            dataset::write_mask_png(&o.mask, &dir.join(format!("{stem}_mask.png")))?;
        }
        Ok(())
    }

    fn epoch_end(&mut self, _log: &EpochLog, checkpoint: &Checkpoint) -> Result<()> {
        let path = self.checkpoints.join(format!("epoch_{:04}.safetensors", checkpoint.epoch));
        checkpoint.save(&path)?;
        self.written.push_back(path);
        while self.written.len() > self.keep_last {
            let old = self.written.pop_front().expect("non-empty");
            std::fs::remove_file(&old).map_err(|e| Error::io(&old, e))?;
        }
        Ok(())
    }
}

/// Trains one run and writes its directory. Returns the directory.
pub fn cmd_train(cfg: &RunConfig, opts: &TrainOptions) -> Result<PathBuf> {
    cfg.validate()?;
    let run_dir = match &opts.run_dir {
        Some(d) => d.clone(),
        None => timestamped_dir(&opts.runs_root, cfg),
    };
    let checkpoints = run_dir.join(CHECKPOINT_DIR);
    create_dir(&checkpoints)?;
    write_bytes(&run_dir.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;

    let (train_set, _) = cfg.data.load(cfg.resolution)?;
    let dump = if opts.dump_perturbations {
        let dir = run_dir.join("perturbations");
        create_dir(&dir)?;
        Some((dir, cfg.dataset_spec()))
    } else {
        None
    };
    let mut writer = RunWriter {
        checkpoints: checkpoints.clone(),
        keep_last: cfg.keep_last,
        written: VecDeque::new(),
        dump,
    };
    let outcome = trainer::train_with(&train_set, cfg, &mut writer)?;
    outcome.final_checkpoint.save(&checkpoints.join(FINAL_CHECKPOINT))?;
    trainer::write_epoch_log(&outcome.logs, &run_dir.join(LOG_FILE))?;
    log::info!("run written to {}", run_dir.display());
    Ok(run_dir)
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Overrides the configured number of trailing checkpoints.
    pub k: Option<usize>,
    /// Overrides the dataset root of an MVTec run.
    pub data_root: Option<PathBuf>,
    /// Number of abnormal test images rendered as triptychs.
    pub heatmaps: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            k: None,
            data_root: None,
            heatmaps: 4,
        }
    }
}

/// Artifacts of one evaluation.
#[derive(Debug, Clone)]
pub struct ReportBundle {
    pub metrics: MetricsReport,
    pub metrics_path: PathBuf,
    pub dd_plot: PathBuf,
    pub curves: PathBuf,
    pub heatmaps: Vec<PathBuf>,
}

impl ReportBundle {
    pub fn artifacts(&self) -> Vec<&Path> {
        let mut v = vec![self.metrics_path.as_path(), self.dd_plot.as_path(), self.curves.as_path()];
        v.extend(self.heatmaps.iter().map(PathBuf::as_path));
        v
    }

    pub fn missing_artifacts(&self) -> Vec<&Path> {
        self.artifacts().into_iter().filter(|p| !p.is_file()).collect()
    }
}

fn with_data_root(mut cfg: RunConfig, root: Option<&Path>) -> RunConfig {
    if let (Some(r), DataConfig::Mvtec { root: slot, .. }) = (root, &mut cfg.data) {
        *slot = Some(r.to_path_buf());
    }
    cfg
}

/// Evaluates the trailing checkpoints of a run and writes the report.
pub fn cmd_eval(run_dir: &Path, opts: &EvalOptions) -> Result<ReportBundle> {
    let cfg = with_data_root(load_run_config(run_dir)?, opts.data_root.as_deref());
    let mut paths = epoch_checkpoint_paths(run_dir)?;
    if paths.is_empty() {
        paths.push(final_checkpoint_path(run_dir)?);
    }
    let device = Device::Cpu;
    let checkpoints = paths
        .iter()
        .map(|p| Checkpoint::load(p, &device))
        .collect::<Result<Vec<_>>>()?;
    let (_, test) = cfg.data.load(cfg.resolution)?;
    let k = opts.k.unwrap_or(cfg.eval.k);
    let report = trainer::evaluate_last_k(&checkpoints, &test, &cfg, k)?;
    let metrics_path = run_dir.join(METRICS_FILE);
    write_bytes(&metrics_path, &serde_json::to_vec_pretty(&report)?)?;

    // figures from the newest checkpoint
    let out = run_dir.join(REPORT_DIR);
    create_dir(&out.join("heatmaps"))?;
    let spec = cfg.dataset_spec();
    let prepared: Vec<Prepared> = test.iter().map(|s| preprocess(s, &spec)).collect();
    let last = checkpoints.last().expect("at least one checkpoint");
    let expert = cfg.expert(&device)?;
    let apprentice = ApprenticeModel::from_params(
        last.backbone,
        &last.hierarchies,
        last.params.clone().into_iter().collect(),
        &device,
    )?;
    let maps = trainer::score_test_set(&prepared, &expert, &apprentice, &cfg)?;
    let set = ScoredSet::new(
        maps.iter().map(|m| m.scores.clone()).collect(),
        prepared.iter().map(Prepared::mask_or_zeros).collect(),
    )?;
    let (normal, abnormal) = metrics::split_scores(&set);
    let stats = metrics::dd_stats(&normal, &abnormal, metrics::DEFAULT_BINS)?;
    let dd_plot = out.join("dd_histogram.png");
    save_png(&histogram_plot(&stats), &dd_plot)?;
    let curves = out.join("discrepancy_curves.png");
    let log_path = run_dir.join(LOG_FILE);
    let logs = if log_path.is_file() {
        trainer::read_epoch_log(&log_path)?
    } else {
        Vec::new()
    };
    save_png(&curves_plot(&logs), &curves)?;

    let mut heatmaps = Vec::new();
    for (p, m) in prepared
        .iter()
        .zip(&maps)
        .filter(|(p, _)| p.label == Label::Abnormal)
        .take(opts.heatmaps)
    {
        let path = out.join("heatmaps").join(format!("{}.png", p.id.replace('/', "_")));
        save_png(&triptych(p, m, &spec), &path)?;
        heatmaps.push(path);
    }
    Ok(ReportBundle {
        metrics: report,
        metrics_path,
        dd_plot,
        curves,
        heatmaps,
    })
}

/// Writes a 16-bit heatmap and JSON sidecar per input image into `out_dir`.
/// Returns `(heatmap path, image score)` per input.
pub fn cmd_infer(run_dir: &Path, images: &[PathBuf], out_dir: &Path) -> Result<Vec<(PathBuf, f32)>> {
    if images.is_empty() {
        return Err(Error::EmptyInput("input images"));
    }
    let cfg = load_run_config(run_dir)?;
    let device = Device::Cpu;
    let ck = Checkpoint::load(&final_checkpoint_path(run_dir)?, &device)?;
    let expert = cfg.expert(&device)?;
    let apprentice = ApprenticeModel::from_params(ck.backbone, &ck.hierarchies, ck.params.into_iter().collect(), &device)?;
    let spec = cfg.dataset_spec();
    create_dir(out_dir)?;
    let mut out = Vec::with_capacity(images.len());
    for path in images {
        let prepared = preprocess(&sample_from_file(path)?, &spec);
        let map = scoring::anomaly_map(&prepared, &expert, &apprentice, &ck.hierarchies, &cfg.scoring(), &device)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let png = out_dir.join(format!("{stem}.png"));
        scoring::write_heatmap(&map, &png)?;
        out.push((png, scoring::image_score(&map)));
    }
    Ok(out)
}

fn sample_from_file(path: &Path) -> Result<Sample> {
    Ok(Sample {
        id: path.display().to_string(),
        image: dataset::read_rgb(path)?,
        mask: None,
        label: Label::Normal,
        split: Split::Test,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Gamma,
    Backbone,
    Resolution,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gamma" => Ok(SweepAxis::Gamma),
            "backbone" => Ok(SweepAxis::Backbone),
            "resolution" => Ok(SweepAxis::Resolution),
            _ => Err(Error::InvalidArgument(format!(
                "unknown sweep axis `{s}`; expected gamma, backbone or resolution"
            ))),
        }
    }
}

/// `cfg` with one axis set to `value`.
pub fn apply_axis(cfg: &RunConfig, axis: SweepAxis, value: &str) -> Result<RunConfig> {
    let mut out = cfg.clone();
    let bad = || Error::InvalidArgument(format!("invalid {axis:?} value `{value}`"));
    match axis {
        SweepAxis::Gamma => out.gamma = value.parse().map_err(|_| bad())?,
        SweepAxis::Backbone => out.backbone = value.parse()?,
        SweepAxis::Resolution => out.resolution = value.parse().map_err(|_| bad())?,
    }
    out.validate()?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub auroc: f64,
    pub aupro: f64,
}

/// Trains and evaluates once per value and writes `(value, auroc, aupro)`.
pub fn cmd_sweep(cfg: &RunConfig, axis: SweepAxis, values: &[String], out_csv: &Path) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::EmptyInput("sweep values"));
    }
    let configs = values
        .iter()
        .map(|v| apply_axis(cfg, axis, v))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(values.len());
    for (value, c) in values.iter().zip(&configs) {
        let (train_set, test) = c.data.load(c.resolution)?;
        let outcome = trainer::train(&train_set, c)?;
        let checkpoints = if outcome.epoch_checkpoints.is_empty() {
            vec![outcome.final_checkpoint]
        } else {
            outcome.epoch_checkpoints
        };
        let report = trainer::evaluate_last_k(&checkpoints, &test, c, c.eval.k)?;
        log::info!("{axis:?} = {value}: auroc {:.4} aupro {:.4}", report.auroc, report.aupro);
        rows.push(SweepRow {
            value: value.clone(),
            auroc: report.auroc,
            aupro: report.aupro,
        });
    }
    if let Some(parent) = out_csv.parent() {
        create_dir(parent)?;
    }
    let mut wtr = csv::Writer::from_path(out_csv)?;
    for row in &rows {
        wtr.serialize(row)?;
    }
    wtr.flush().map_err(|e| Error::io(out_csv, e))?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub backbone: BackboneId,
    pub n_images: usize,
    pub seconds: f64,
    pub fps: f64,
    /// Float parameters of expert and apprentice, 4 bytes each, in MiB.
    pub model_size_mb: f64,
    pub expert_scalars: usize,
    pub apprentice_scalars: usize,
}

/// Bytes of `scalars` f32 values in MiB.
pub fn model_size_mb(scalars: usize) -> f64 {
    (scalars * 4) as f64 / (1024.0 * 1024.0)
}

/// Inputs for the benchmark: the test images of an MVTec run, or the toy
/// test images written once under `<run>/bench_inputs`.
fn bench_inputs(run_dir: &Path, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    match &cfg.data {
        DataConfig::Mvtec { category, .. } => {
            let test_dir = cfg.data.root()?.join(category).join("test");
            let mut paths = Vec::new();
            for group in std::fs::read_dir(&test_dir).map_err(|e| Error::io(&test_dir, e))? {
                let group = group.map_err(|e| Error::io(&test_dir, e))?.path();
                if group.is_dir() {
                    for f in std::fs::read_dir(&group).map_err(|e| Error::io(&group, e))? {
                        let f = f.map_err(|e| Error::io(&group, e))?.path();
                        if f.extension().is_some_and(|e| e == "png") {
                            paths.push(f);
                        }
                    }
                }
            }
            paths.sort();
            Ok(paths)
        }
        DataConfig::Toy { .. } => {
            let dir = run_dir.join("bench_inputs");
            create_dir(&dir)?;
            let (_, test) = cfg.data.load(cfg.resolution)?;
            test.iter()
                .map(|s| {
                    let path = dir.join(format!("{}.png", s.id.replace('/', "_")));
                    if !path.is_file() {
                        dataset::write_rgb_png(&s.image, &path)?;
                    }
                    Ok(path)
                })
                .collect()
        }
    }
}

/// End-to-end single-image throughput (decode, preprocess, both forwards,
/// map assembly) and model size.
pub fn cmd_bench(run_dir: &Path, n_images: usize) -> Result<BenchReport> {
    if n_images == 0 {
        return Err(Error::InvalidArgument("n_images must be positive".into()));
    }
    let cfg = load_run_config(run_dir)?;
    let device = Device::Cpu;
    let ck = Checkpoint::load(&final_checkpoint_path(run_dir)?, &device)?;
    let expert = cfg.expert(&device)?;
    let apprentice = ApprenticeModel::from_params(ck.backbone, &ck.hierarchies, ck.params.into_iter().collect(), &device)?;
    let inputs = bench_inputs(run_dir, &cfg)?;
    if inputs.is_empty() {
        return Err(Error::EmptyInput("benchmark images"));
    }
    let spec = cfg.dataset_spec();
    let run_one = |path: &Path| -> Result<AnomalyMap> {
        let prepared = preprocess(&sample_from_file(path)?, &spec);
        scoring::anomaly_map(&prepared, &expert, &apprentice, &ck.hierarchies, &cfg.scoring(), &device)
    };
    run_one(&inputs[0])?;
    let started = Instant::now();
    for i in 0..n_images {
        run_one(&inputs[i % inputs.len()])?;
    }
    let seconds = started.elapsed().as_secs_f64();
    let expert_scalars = expert.scalar_count();
    let apprentice_scalars = apprentice.scalar_count();
    Ok(BenchReport {
        backbone: cfg.backbone,
        n_images,
        seconds,
        fps: n_images as f64 / seconds,
        model_size_mb: model_size_mb(expert_scalars + apprentice_scalars),
        expert_scalars,
        apprentice_scalars,
    })
}

const NORMAL_RGB: [f32; 3] = [40.0, 110.0, 220.0];
const ABNORMAL_RGB: [f32; 3] = [220.0, 50.0, 40.0];

fn blend(px: &mut Rgb<u8>, color: [f32; 3], alpha: f32) {
    for c in 0..3 {
        px[c] = (px[c] as f32 * (1.0 - alpha) + color[c] * alpha).round() as u8;
    }
}

/// Overlaid normal and abnormal histograms on shared bins.
pub fn histogram_plot(stats: &DDStats) -> RgbImage {
    let (w, h, pad) = (520u32, 280u32, 20u32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let bins = stats.hist_n.len() as u32;
    let peak = stats
        .hist_n
        .iter()
        .chain(&stats.hist_a)
        .copied()
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let bar_w = ((w - 2 * pad) / bins).max(1);
    for (hist, color) in [(&stats.hist_n, NORMAL_RGB), (&stats.hist_a, ABNORMAL_RGB)] {
        for (b, &v) in hist.iter().enumerate() {
            let bar_h = ((v / peak) * (h - 2 * pad) as f64).round() as u32;
            let x0 = pad + b as u32 * bar_w;
            for x in x0..(x0 + bar_w).min(w - pad) {
                for y in (h - pad - bar_h)..(h - pad) {
                    blend(img.get_pixel_mut(x, y), color, 0.55);
                }
            }
        }
    }
    for x in pad..w - pad {
        img.put_pixel(x, h - pad, Rgb([0, 0, 0]));
    }
    img
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Per-epoch mean normal (blue) and synthetic-abnormal (red) discrepancy.
pub fn curves_plot(logs: &[EpochLog]) -> RgbImage {
    let (w, h, pad) = (520u32, 280u32, 20i64);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    for x in pad..w as i64 - pad {
        img.put_pixel(x as u32, (h as i64 - pad) as u32, Rgb([0, 0, 0]));
    }
    if logs.is_empty() {
        return img;
    }
    let peak = logs
        .iter()
        .flat_map(|l| [l.mu_n, l.mu_s])
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let span_x = (w as i64 - 2 * pad) as f64;
    let span_y = (h as i64 - 2 * pad) as f64;
    let point = |i: usize, v: f64| {
        let x = pad + (i as f64 / (logs.len().max(2) - 1) as f64 * span_x).round() as i64;
        let y = h as i64 - pad - (v / peak * span_y).round() as i64;
        (x, y)
    };
    for (series, color) in [(0, Rgb([40, 110, 220])), (1, Rgb([220, 50, 40]))] {
        let value = |l: &EpochLog| if series == 0 { l.mu_n } else { l.mu_s };
        for i in 1..logs.len() {
            draw_line(&mut img, point(i - 1, value(&logs[i - 1])), point(i, value(&logs[i])), color);
        }
        if logs.len() == 1 {
            let (x, y) = point(0, value(&logs[0]));
            draw_line(&mut img, (x, y), (x, y), color);
        }
    }
    img
}

/// Blue to red colour ramp over `[0, 1]`.
fn ramp(t: f32) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    let r = (255.0 * (1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0)) as u8;
    let g = (255.0 * (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0)) as u8;
    let b = (255.0 * (1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0)) as u8;
    Rgb([r, g, b])
}

/// Input, ground truth and anomaly map side by side.
pub fn triptych(prepared: &Prepared, map: &AnomalyMap, spec: &dataset::DatasetSpec) -> RgbImage {
    let rgb: Array3<f32> = dataset::denormalize(&prepared.image, spec);
    let mask: Array2<u8> = prepared.mask_or_zeros();
    let r = prepared.resolution() as u32;
    let lo = map.scores.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = (hi - lo).max(f32::MIN_POSITIVE);
    let mut img = RgbImage::new(3 * r, r);
    for y in 0..r as usize {
        for x in 0..r as usize {
            let px = |c: usize| (rgb[[y, x, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, Rgb([px(0), px(1), px(2)]));
            let m = mask[[y, x]] * 255;
            img.put_pixel(r + x as u32, y as u32, Rgb([m, m, m]));
            img.put_pixel(2 * r + x as u32, y as u32, ramp((map.scores[[y, x]] - lo) / span));
        }
    }
    img
}
