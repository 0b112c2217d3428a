//! Sweeps the focal exponent and writes `gamma_sweep.csv`.

use std::path::Path;

use cdo::report::{cmd_sweep, SweepAxis};
use cdo::trainer::RunConfig;

fn main() -> cdo::Result<()> {
    let cfg = RunConfig {
        epochs: 20,
        ..RunConfig::toy()
    };
    let values: Vec<String> = ["0", "1", "2", "3", "4"].map(String::from).to_vec();
    for row in cmd_sweep(&cfg, SweepAxis::Gamma, &values, Path::new("gamma_sweep.csv"))? {
        println!("gamma {:>3}: AU-ROC {:.4} AU-PRO {:.4}", row.value, row.auroc, row.aupro);
    }
    Ok(())
}
