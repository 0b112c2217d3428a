use cdo::metrics::{aupro, aupro_exact, aupro_grid, auroc_pixel, dd_stats, label_regions, ScoredSet};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

/// Mask with a few random rectangles.
fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, rects: usize) -> Array2<u8> {
    let mut m = Array2::zeros((h, w));
    for _ in 0..rects {
        let (rh, rw) = (rng.random_range(1..=h / 3), rng.random_range(1..=w / 3));
        let (top, left) = (rng.random_range(0..=h - rh), rng.random_range(0..=w - rw));
        m.slice_mut(ndarray::s![top..top + rh, left..left + rw]).fill(1);
    }
    m
}

fn instance(seed: u64, images: usize, side: usize, levels: u32) -> ScoredSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ScoredSet::default();
    for _ in 0..images {
        let rects = rng.random_range(1..=3);
        let mask = random_mask(&mut rng, side, side, rects);
        let scores = mask.mapv(|v| {
            let base: f32 = rng.random_range(0..levels) as f32 / levels as f32;
            base + if v == 1 { 0.3 } else { 0.0 }
        });
        set.push(scores, mask);
    }
    set
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn strictly_increasing_transforms_leave_metrics_unchanged(seed in any::<u64>()) {
        let set = instance(seed, 3, 12, 16);
        // x -> exp(3x) + x keeps every distinct f32 score distinct here
        let moved = ScoredSet::new(
            set.maps.iter().map(|m| m.mapv(|v| (3.0 * v).exp() + v)).collect(),
            set.masks.clone(),
        ).unwrap();
        prop_assert!((auroc_pixel(&set).unwrap() - auroc_pixel(&moved).unwrap()).abs() < 1e-9);
        prop_assert!((aupro(&set, 0.3).unwrap() - aupro(&moved, 0.3).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn aupro_is_a_fraction(seed in any::<u64>(), limit in 0.01f64..1.0) {
        let set = instance(seed, 2, 10, 8);
        let v = aupro(&set, limit).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
    }

    #[test]
    fn overlap_is_symmetric(a in prop::collection::vec(0.0f64..4.0, 1..200), b in prop::collection::vec(0.0f64..4.0, 1..200)) {
        let ab = dd_stats(&a, &b, 50).unwrap();
        let ba = dd_stats(&b, &a, 50).unwrap();
        prop_assert!((ab.overlap - ba.overlap).abs() < 1e-12);
        prop_assert!((ab.margin - ba.margin).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab.overlap));
    }
}

#[test]
fn grid_agrees_with_exact_on_large_instances() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ScoredSet::default();
        for _ in 0..4 {
            let mask = random_mask(&mut rng, 64, 64, 3);
            let scores = mask.mapv(|v| rng.random::<f32>() + if v == 1 { 0.4 } else { 0.0 });
            set.push(scores, mask);
        }
        let exact = aupro_exact(&set, 0.3).unwrap();
        let grid = aupro_grid(&set, 0.3, 1000).unwrap();
        assert!((exact - grid).abs() < 1e-3, "seed {seed}: exact {exact} grid {grid}");
    }
}

#[test]
fn region_fully_detected_at_zero_fpr_gives_one() {
    let mut mask = Array2::zeros((6, 6));
    mask.slice_mut(ndarray::s![1..3, 2..5]).fill(1);
    let scores = mask.mapv(|v: u8| if v == 1 { 5.0 } else { 1.0 });
    let set = ScoredSet::new(vec![scores], vec![mask]).unwrap();
    assert!((aupro(&set, 0.3).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn single_region_per_image_tracks_roc() {
    // With one region per image PRO is the mean per-image recall; a
    // threshold-free instance pins both metrics to the same extremes.
    let mut mask = Array2::zeros((5, 5));
    mask[[2, 2]] = 1;
    let good = ScoredSet::new(vec![mask.mapv(|v| v as f32)], vec![mask.clone()]).unwrap();
    assert_eq!(auroc_pixel(&good).unwrap(), 1.0);
    assert!((aupro(&good, 0.3).unwrap() - 1.0).abs() < 1e-12);
    let bad = ScoredSet::new(vec![mask.mapv(|v| 1.0 - v as f32)], vec![mask]).unwrap();
    assert_eq!(auroc_pixel(&bad).unwrap(), 0.0);
    assert_eq!(aupro(&bad, 0.3).unwrap(), 0.0);
}

#[test]
fn gaussian_overlap_matches_the_analytic_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a: Vec<f64> = Normal::new(0.0, 1.0).unwrap().sample_iter(&mut rng).take(10_000).collect();
    let b: Vec<f64> = Normal::new(5.0, 1.0).unwrap().sample_iter(&mut rng).take(10_000).collect();
    let stats = dd_stats(&a, &b, 100).unwrap();
    let analytic = 2.0 * StatNormal::new(0.0, 1.0).unwrap().cdf(-2.5);
    assert!((analytic - 0.0124).abs() < 1e-4);
    assert!((stats.overlap - analytic).abs() < 0.01, "{} vs {analytic}", stats.overlap);
    assert!((stats.margin - 5.0).abs() < 0.05);
}

#[test]
fn histograms_are_densities_on_shared_edges() {
    let s = dd_stats(&[0.0, 1.0, 2.0], &[1.0, 3.0], 4).unwrap();
    assert_eq!(s.edges.len(), 5);
    let width = s.edges[1] - s.edges[0];
    assert!((s.hist_n.iter().sum::<f64>() * width - 1.0).abs() < 1e-12);
    assert!((s.hist_a.iter().sum::<f64>() * width - 1.0).abs() < 1e-12);
}

#[test]
fn labeling_matches_breadth_first_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let mask = Array2::from_shape_fn((9, 11), |_| u8::from(rng.random_bool(0.35)));
        let (labels, n) = label_regions(&mask);
        let mut seen = Array2::<bool>::from_elem(mask.dim(), false);
        let mut count = 0;
        for start in 0..mask.len() {
            let (r, c) = (start / 11, start % 11);
            if mask[[r, c]] == 0 || seen[[r, c]] {
                continue;
            }
            count += 1;
            let id = labels[[r, c]];
            let mut queue = vec![(r, c)];
            seen[[r, c]] = true;
            while let Some((y, x)) = queue.pop() {
                assert_eq!(labels[[y, x]], id);
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= 9 || nx >= 11 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask[[ny, nx]] == 1 && !seen[[ny, nx]] {
                            seen[[ny, nx]] = true;
                            queue.push((ny, nx));
                        }
                    }
                }
            }
        }
        assert_eq!(n, count);
    }
}
