//! Per-epoch mean discrepancy on normal and synthetic-abnormal cells for the
//! normal-only objective and the margin objective.
//!
//! Minimizing normal discrepancy alone drags the abnormal one down with it;
//! pushing abnormal cells apart keeps them up.

use cdo::loss::LossMode;
use cdo::trainer::{train, RunConfig};

fn main() -> cdo::Result<()> {
    let epochs = std::env::var("EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(20);
    for mode in [LossMode::Baseline, LossMode::Mom] {
        let cfg = RunConfig {
            epochs,
            loss_mode: mode,
            ..RunConfig::toy()
        };
        let (train_set, _) = cfg.data.load(cfg.resolution)?;
        let outcome = train(&train_set, &cfg)?;
        println!("({}) {mode}", mode.case_number());
        println!("epoch   normal  abnormal");
        for log in &outcome.logs {
            println!("{:>5} {:>8.4} {:>9.4}", log.epoch, log.mu_n, log.mu_s);
        }
        println!();
    }
    Ok(())
}
