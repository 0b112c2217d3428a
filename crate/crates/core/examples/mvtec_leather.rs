//! Full-scale recipe on one MVTec category with the HRNet-32 expert.
//!
//! Needs `CDO_DATA_ROOT` pointing at an MVTec AD checkout and
//! `CDO_WEIGHTS_DIR` holding `hrnet_w32.safetensors` (see the README for the
//! export command). Expect hours per run on CPU.

use std::path::PathBuf;

use cdo::report::{cmd_eval, cmd_train, EvalOptions, TrainOptions};
use cdo::trainer::{DataConfig, RunConfig};

fn main() -> cdo::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let category = std::env::args().nth(1).unwrap_or_else(|| "leather".into());
    let cfg = RunConfig {
        data: DataConfig::Mvtec { root: None, category },
        ..RunConfig::default()
    };
    let run_dir = PathBuf::from(format!("runs/{}", cfg.data.category()));
    cmd_train(
        &cfg,
        &TrainOptions {
            run_dir: Some(run_dir.clone()),
            ..TrainOptions::default()
        },
    )?;
    let m = cmd_eval(&run_dir, &EvalOptions::default())?.metrics;
    println!("AU-ROC {:.2}  AU-PRO {:.2}", 100.0 * m.auroc, 100.0 * m.aupro);
    Ok(())
}
