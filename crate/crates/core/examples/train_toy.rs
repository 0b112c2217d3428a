//! Trains the toy apprentice, evaluates the last five checkpoints and writes
//! the report figures.
//!
//! cargo run --release --example train_toy -- runs/toy

use std::path::PathBuf;

use cdo::report::{cmd_eval, cmd_train, EvalOptions, TrainOptions};
use cdo::trainer::RunConfig;

fn main() -> cdo::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let run_dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs/toy".into()));
    let cfg = RunConfig::toy();
    cmd_train(
        &cfg,
        &TrainOptions {
            run_dir: Some(run_dir.clone()),
            dump_perturbations: true,
            ..TrainOptions::default()
        },
    )?;
    let bundle = cmd_eval(&run_dir, &EvalOptions::default())?;
    let m = &bundle.metrics;
    println!("AU-ROC {:.2} ± {:.2}", 100.0 * m.auroc, 100.0 * m.std.auroc);
    println!("AU-PRO {:.2} ± {:.2}", 100.0 * m.aupro, 100.0 * m.std.aupro);
    for path in bundle.artifacts() {
        println!("  {}", path.display());
    }
    Ok(())
}
