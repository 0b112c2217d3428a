//! Four objectives x N seeds on the toy set; prints mean and spread of the
//! last-five-checkpoint AU-ROC and AU-PRO.
//!
//! SEEDS=0,1,2 cargo run --release --example ablation_table

use cdo::loss::LossMode;
use cdo::metrics::mean_std;
use cdo::trainer::{evaluate_last_k, train, RunConfig};

fn main() -> cdo::Result<()> {
    let seeds: Vec<u64> = std::env::var("SEEDS")
        .unwrap_or_else(|_| "0,1,2".into())
        .split(',')
        .map(|s| s.trim().parse().expect("seed"))
        .collect();
    println!("case objective     AU-ROC          AU-PRO");
    for mode in LossMode::ALL {
        let (mut roc, mut pro) = (Vec::new(), Vec::new());
        for &seed in &seeds {
            let cfg = RunConfig {
                seed,
                loss_mode: mode,
                ..RunConfig::toy()
            };
            let (train_set, test) = cfg.data.load(cfg.resolution)?;
            let outcome = train(&train_set, &cfg)?;
            let report = evaluate_last_k(&outcome.epoch_checkpoints, &test, &cfg, cfg.eval.k)?;
            roc.push(100.0 * report.auroc);
            pro.push(100.0 * report.aupro);
        }
        let ((rm, rs), (pm, ps)) = (mean_std(&roc), mean_std(&pro));
        println!("({})  {mode:<12} {rm:6.2} ± {rs:4.2}   {pm:6.2} ± {ps:4.2}", mode.case_number());
    }
    Ok(())
}
