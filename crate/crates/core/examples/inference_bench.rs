//! Throughput and model size. Trains a short toy run first unless a run
//! directory is given.

use std::path::PathBuf;

use cdo::report::{cmd_bench, cmd_train, TrainOptions};
use cdo::trainer::RunConfig;

fn main() -> cdo::Result<()> {
    let run_dir = match std::env::args().nth(1) {
        Some(dir) => PathBuf::from(dir),
        None => {
            let cfg = RunConfig {
                epochs: 2,
                ..RunConfig::toy()
            };
            cmd_train(
                &cfg,
                &TrainOptions {
                    run_dir: Some(PathBuf::from("runs/bench")),
                    ..TrainOptions::default()
                },
            )?
        }
    };
    let bench = cmd_bench(&run_dir, 50)?;
    println!(
        "{}: {:.1} images/s over {} images, {:.2} MiB ({} + {} parameters)",
        bench.backbone, bench.fps, bench.n_images, bench.model_size_mb, bench.expert_scalars, bench.apprentice_scalars
    );
    Ok(())
}
