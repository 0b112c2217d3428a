use candle_core::Device;
use cdo::dataset::{generate_toy_dataset, preprocess, DatasetSpec, Prepared};
use cdo::features::{ApprenticeModel, BackboneId, DiscrepancyMode, ExpertModel};
use cdo::scoring::{
    anomaly_map, anomaly_maps, image_score, read_heatmap, read_map_csv, write_heatmap, write_map_csv, AnomalyMap,
    ScoringConfig,
};
use cdo::Error;
use ndarray::Array2;

fn prepared(resolution: usize, n: usize) -> Vec<Prepared> {
    let spec = DatasetSpec::new("toy", "toy", resolution);
    generate_toy_dataset(9, 0, 1, n.saturating_sub(1), resolution)
        .iter()
        .map(|s| preprocess(s, &spec))
        .collect()
}

#[test]
fn apprentice_equal_to_expert_gives_a_zero_map() {
    let dev = Device::Cpu;
    let h = [1, 2, 3];
    let expert = ExpertModel::seeded(BackboneId::Toy, &h, 11, &dev).unwrap();
    let params = expert.params().clone().into_iter().collect();
    let apprentice = ApprenticeModel::from_params(BackboneId::Toy, &h, params, &dev).unwrap();
    for p in prepared(64, 3) {
        let map = anomaly_map(&p, &expert, &apprentice, &h, &ScoringConfig::default(), &dev).unwrap();
        assert!(image_score(&map) <= 1e-6, "{}", image_score(&map));
    }
}

#[test]
fn maps_match_input_resolution_and_are_nonnegative() {
    let dev = Device::Cpu;
    let cases = [
        (BackboneId::Toy, vec![1, 2, 3], 64),
        (BackboneId::Toy, vec![2], 96),
        (BackboneId::Res18, vec![1, 2, 3], 64),
        (BackboneId::Hr18, vec![2, 3], 64),
    ];
    for (backbone, h, res) in cases {
        let expert = ExpertModel::seeded(backbone, &h, 1, &dev).unwrap();
        let apprentice = ApprenticeModel::random(backbone, &h, 2, &dev).unwrap();
        let batch = prepared(res, 2);
        let refs: Vec<&Prepared> = batch.iter().collect();
        for mode in [DiscrepancyMode::Squared, DiscrepancyMode::Norm] {
            let cfg = ScoringConfig {
                discrepancy: mode,
                blur_sigma: None,
            };
            let maps = anomaly_maps(&refs, &expert, &apprentice, &h, &cfg, &dev).unwrap();
            for (m, p) in maps.iter().zip(&batch) {
                assert_eq!(m.scores.dim(), (res, res), "{backbone} {h:?}");
                assert_eq!(m.source_id, p.id);
                assert!(m.scores.iter().all(|v| v.is_finite() && *v >= 0.0));
                // summing over hierarchies bounds each pixel by 4 per level
                assert!(image_score(m) <= 4.0 * h.len() as f32 + 1e-4);
            }
        }
    }
}

#[test]
fn unknown_hierarchy_is_rejected() {
    let dev = Device::Cpu;
    let expert = ExpertModel::seeded(BackboneId::Toy, &[1, 2], 1, &dev).unwrap();
    let apprentice = ApprenticeModel::random(BackboneId::Toy, &[1, 2], 2, &dev).unwrap();
    let p = &prepared(64, 1)[0];
    let err = anomaly_map(p, &expert, &apprentice, &[3], &ScoringConfig::default(), &dev).unwrap_err();
    assert!(matches!(err, Error::HierarchyMismatch { .. }), "{err}");
}

#[test]
fn heatmap_png_round_trip_is_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let scores = Array2::from_shape_fn((20, 30), |(y, x)| (y as f32 * 0.37 + x as f32 * 0.11).sin().abs() * 3.0);
    let map = AnomalyMap {
        scores: scores.clone(),
        source_id: "toy/test/anomaly/0001".into(),
    };
    let png = dir.path().join("map.png");
    let side = write_heatmap(&map, &png).unwrap();
    assert_eq!(side.source_id, map.source_id);
    let back = read_heatmap(&png).unwrap();
    assert_eq!(back.source_id, map.source_id);
    let step = (side.max - side.min) / 65535.0;
    for (a, b) in scores.iter().zip(back.scores.iter()) {
        assert!((a - b).abs() <= step, "{a} vs {b}");
    }
}

#[test]
fn heatmap_csv_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let scores = Array2::from_shape_fn((7, 5), |(y, x)| (y * 5 + x) as f32 / 7.0 + 1e-7);
    let map = AnomalyMap {
        scores: scores.clone(),
        source_id: "x".into(),
    };
    let path = dir.path().join("map.csv");
    write_map_csv(&map, &path).unwrap();
    assert_eq!(read_map_csv(&path).unwrap(), scores);
}

#[test]
fn constant_map_survives_png_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let map = AnomalyMap {
        scores: Array2::from_elem((4, 4), 0.25),
        source_id: "flat".into(),
    };
    let png = dir.path().join("flat.png");
    write_heatmap(&map, &png).unwrap();
    assert_eq!(read_heatmap(&png).unwrap().scores, map.scores);
}
