//! AU-ROC, AU-PRO and discrepancy-distribution statistics on a small scored
//! set, next to the exact and thresholded AU-PRO.

use cdo::metrics::{aupro_exact, aupro_grid, auroc_pixel, dd_stats, label_regions, split_scores, ScoredSet};
use ndarray::{s, Array2};

fn main() -> cdo::Result<()> {
    let mut mask = Array2::<u8>::zeros((32, 32));
    mask.slice_mut(s![4..10, 4..12]).fill(1);
    mask.slice_mut(s![20..22, 25..27]).fill(1);
    let (_, regions) = label_regions(&mask);
    // large region found easily, small one barely above background
    let scores = Array2::from_shape_fn((32, 32), |(y, x)| {
        let grain = ((y * 7 + x * 13) % 17) as f32 / 17.0;
        match (mask[[y, x]], y < 16) {
            (1, true) => 1.5 + grain,
            (1, false) => 0.6 + grain,
            _ => grain,
        }
    });
    let set = ScoredSet::new(vec![scores], vec![mask])?;
    println!("{regions} regions");
    println!("AU-ROC          {:.4}", auroc_pixel(&set)?);
    println!("AU-PRO exact    {:.4}", aupro_exact(&set, 0.3)?);
    println!("AU-PRO 1000 thr {:.4}", aupro_grid(&set, 0.3, 1000)?);
    let (normal, abnormal) = split_scores(&set);
    let dd = dd_stats(&normal, &abnormal, 50)?;
    println!("margin {:.3}, overlap {:.3}", dd.margin, dd.overlap);
    Ok(())
}
