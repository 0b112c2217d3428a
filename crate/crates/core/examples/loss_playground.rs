//! The four training objectives and the focal weights on one hand-made
//! batch of discrepancies.

use cdo::loss::{coefficients, loss, oom_weights, DDBatch, LossMode, DEFAULT_EPS};

fn main() -> cdo::Result<()> {
    let batch = DDBatch::new(vec![0.1, 0.2, 0.2, 0.3, 1.4], vec![0.05, 1.8, 2.0, 2.2]);
    println!("mean normal {:.3}, mean synthetic-abnormal {:.3}", batch.mu_n(), batch.mu_s());
    for gamma in [0.0, 1.0, 2.0, 4.0] {
        let w = oom_weights(&batch.d_n, &batch.d_s, gamma, DEFAULT_EPS)?;
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:>12.3}")).collect::<String>();
        println!("gamma {gamma}: normal weights {} | abnormal weights {}", fmt(&w.w_n), fmt(&w.w_s));
    }
    println!();
    for mode in LossMode::ALL {
        let value = loss(mode, &batch, 2.0, DEFAULT_EPS)?;
        let c = coefficients(mode, &batch, 2.0, DEFAULT_EPS)?;
        // the hard normal (1.4) and the hard abnormal (0.05) get the largest pull
        println!(
            "({}) {mode:<12} loss {value:+.4}  dL/dd normal {:?}",
            mode.case_number(),
            c.d_n.iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>()
        );
    }
    Ok(())
}
