use std::path::PathBuf;
use std::process::ExitCode;

use cdo::report::{self, EvalOptions, SweepAxis, TrainOptions};
use cdo::trainer::{RunConfig, DATA_ROOT_ENV};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cdo", version, about = "Train and evaluate expert/apprentice anomaly localizers")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory to write (train) or read (eval, infer, bench).
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Compute device; only `cpu` is supported.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    /// Root of the MVTec-layout dataset.
    #[arg(long, global = true, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an apprentice and write a run directory.
    Train {
        /// Parent of timestamped run directories when --run-dir is absent.
        #[arg(long, default_value = "runs")]
        runs_root: PathBuf,
        /// Save the perturbed inputs of the first epoch.
        #[arg(long)]
        dump_perturbations: bool,
    },
    /// Evaluate the trailing checkpoints of a run.
    Eval {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 4)]
        heatmaps: usize,
    },
    /// Write anomaly heatmaps for images.
    Infer {
        #[arg(long, default_value = "heatmaps")]
        out: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Train and evaluate once per value of one axis.
    Sweep {
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
    },
    /// Measure end-to-end inference speed and model size.
    Bench {
        #[arg(long, default_value_t = 50)]
        n_images: usize,
    },
}

fn load_config(cli: &Cli) -> cdo::Result<RunConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| cdo::Error::InvalidArgument("--config is required".into()))?;
    let mut cfg = RunConfig::from_file(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let (Some(root), cdo::trainer::DataConfig::Mvtec { root: slot @ None, .. }) = (&cli.data_root, &mut cfg.data) {
        *slot = Some(root.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_dir(cli: &Cli) -> cdo::Result<PathBuf> {
    cli.run_dir
        .clone()
        .ok_or_else(|| cdo::Error::InvalidArgument("--run-dir is required".into()))
}

fn run(cli: &Cli) -> cdo::Result<()> {
    if cli.device != "cpu" {
        return Err(cdo::Error::InvalidArgument(format!(
            "device `{}` is not available; this build runs on cpu",
            cli.device
        )));
    }
    match &cli.command {
        Command::Train {
            runs_root,
            dump_perturbations,
        } => {
            let cfg = load_config(cli)?;
            let dir = report::cmd_train(
                &cfg,
                &TrainOptions {
                    run_dir: cli.run_dir.clone(),
                    runs_root: runs_root.clone(),
                    dump_perturbations: *dump_perturbations,
                },
            )?;
            println!("{}", dir.display());
        }
        Command::Eval { k, heatmaps } => {
            let bundle = report::cmd_eval(
                &run_dir(cli)?,
                &EvalOptions {
                    k: *k,
                    data_root: cli.data_root.clone(),
                    heatmaps: *heatmaps,
                },
            )?;
            println!("{}", serde_json::to_string_pretty(&bundle.metrics)?);
        }
        Command::Infer { out, images } => {
            for (path, score) in report::cmd_infer(&run_dir(cli)?, images, out)? {
                println!("{}\t{score}", path.display());
            }
        }
        Command::Sweep { axis, values, out } => {
            let cfg = load_config(cli)?;
            for row in report::cmd_sweep(&cfg, *axis, values, out)? {
                println!("{}\t{:.6}\t{:.6}", row.value, row.auroc, row.aupro);
            }
        }
        Command::Bench { n_images } => {
            let bench = report::cmd_bench(&run_dir(cli)?, *n_images)?;
            println!("{}", serde_json::to_string_pretty(&bench)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
