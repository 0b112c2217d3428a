use super::*;

fn pyramid(levels: Vec<Tensor>) -> FeaturePyramid {
    FeaturePyramid {
        hierarchies: (1..=levels.len()).collect(),
        levels,
    }
}

#[test]
fn normalized_vectors_have_unit_norm_and_zero_stays_zero() {
    let dev = Device::Cpu;
    // channel vectors: (3,4) at location 0, (0,0) at location 1
    let t = Tensor::from_vec(vec![3f32, 0., 4., 0.], (1, 2, 1, 2), &dev).unwrap();
    let n = normalize_features(&pyramid(vec![t])).unwrap();
    let v = n.levels[0].flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert!((v[0] - 0.6).abs() < 1e-6 && (v[2] - 0.8).abs() < 1e-6);
    assert_eq!(v[1], 0.0);
    assert_eq!(v[3], 0.0);
}

#[test]
fn discrepancy_matches_hand_values() {
    let dev = Device::Cpu;
    let e = Tensor::from_vec(vec![1f32, 0.], (1, 2, 1, 1), &dev).unwrap();
    let a = Tensor::from_vec(vec![0f32, 1.], (1, 2, 1, 1), &dev).unwrap();
    let sq = discrepancy(&pyramid(vec![e.clone()]), &pyramid(vec![a.clone()]), DiscrepancyMode::Squared).unwrap();
    let nm = discrepancy(&pyramid(vec![e]), &pyramid(vec![a]), DiscrepancyMode::Norm).unwrap();
    assert!((sq.levels[0].flatten_all().unwrap().to_vec1::<f32>().unwrap()[0] - 2.0).abs() < 1e-6);
    assert!((nm.levels[0].flatten_all().unwrap().to_vec1::<f32>().unwrap()[0] - 2f32.sqrt()).abs() < 1e-6);
}

#[test]
fn mismatched_shapes_name_the_level() {
    let dev = Device::Cpu;
    let e = Tensor::zeros((1, 4, 2, 2), DType::F32, &dev).unwrap();
    let a = Tensor::zeros((1, 4, 3, 3), DType::F32, &dev).unwrap();
    let err = discrepancy(&pyramid(vec![e]), &pyramid(vec![a]), DiscrepancyMode::Squared).unwrap_err();
    match err {
        Error::ShapeMismatch { level, .. } => assert_eq!(level, 1),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn toy_expert_and_apprentice_shapes_line_up() {
    let dev = Device::Cpu;
    let expert = ExpertModel::pretrained(BackboneId::Toy, &[1, 2, 3], None, &dev).unwrap();
    let apprentice = ApprenticeModel::random(BackboneId::Toy, &[1, 2, 3], 3, &dev).unwrap();
    let x = Tensor::zeros((2, 3, 32, 32), DType::F32, &dev).unwrap();
    let fe = expert.forward(&x).unwrap();
    let fa = apprentice.forward(&x, true).unwrap();
    assert_eq!(fe.shapes(), fa.shapes());
    assert_eq!(fe.shapes()[0], vec![2, 16, 16, 16]);
    assert_eq!(fe.shapes()[2], vec![2, 64, 4, 4]);
    assert_eq!(expert.scalar_count(), apprentice.scalar_count());
}

#[test]
fn expert_weights_ignore_the_apprentice_seed() {
    let dev = Device::Cpu;
    let a = ExpertModel::pretrained(BackboneId::Toy, &[1, 2], None, &dev).unwrap();
    let b = ExpertModel::pretrained(BackboneId::Toy, &[1, 2], None, &dev).unwrap();
    assert_eq!(a.param_hash().unwrap(), b.param_hash().unwrap());
    let r1 = ApprenticeModel::random(BackboneId::Toy, &[1, 2], 1, &dev).unwrap();
    let r2 = ApprenticeModel::random(BackboneId::Toy, &[1, 2], 2, &dev).unwrap();
    assert_ne!(r1.param_hash().unwrap(), r2.param_hash().unwrap());
}

#[test]
fn resnet18_levels_have_documented_shapes() {
    let dev = Device::Cpu;
    let m = ExpertModel::seeded(BackboneId::Res18, &[0, 1, 2, 3, 4], 0, &dev).unwrap();
    let x = Tensor::zeros((1, 3, 64, 64), DType::F32, &dev).unwrap();
    let shapes = m.forward(&x).unwrap().shapes();
    for (level, shape) in shapes.iter().enumerate() {
        let s = BackboneId::Res18.stride(level);
        assert_eq!(shape, &vec![1, BackboneId::Res18.channels(level), 64 / s, 64 / s]);
    }
}

#[test]
fn hrnet18_levels_have_documented_shapes() {
    let dev = Device::Cpu;
    let m = ExpertModel::seeded(BackboneId::Hr18, &[0, 1, 2, 3], 0, &dev).unwrap();
    let x = Tensor::zeros((1, 3, 64, 64), DType::F32, &dev).unwrap();
    let shapes = m.forward(&x).unwrap().shapes();
    for (i, shape) in shapes.iter().enumerate() {
        let s = BackboneId::Hr18.stride(i);
        assert_eq!(shape, &vec![1, BackboneId::Hr18.channels(i), 64 / s, 64 / s]);
    }
}

#[test]
fn missing_weights_carry_a_conversion_hint() {
    let dev = Device::Cpu;
    let dir = tempfile::tempdir().unwrap();
    let err = ExpertModel::pretrained(BackboneId::Res18, &[1, 2, 3], Some(dir.path()), &dev)
        .err()
        .unwrap();
    let text = err.to_string();
    assert!(text.contains("resnet18.safetensors"), "{text}");
    assert!(text.contains("timm"), "{text}");
}

#[test]
fn hierarchy_validation() {
    assert!(BackboneId::Toy.validate_hierarchies(&[1, 2, 3]).is_ok());
    assert!(BackboneId::Toy.validate_hierarchies(&[0]).is_err());
    assert!(BackboneId::Res50.validate_hierarchies(&[2, 1]).is_err());
    assert!(BackboneId::Res50.validate_hierarchies(&[]).is_err());
    assert_eq!("WRES50".parse::<BackboneId>().unwrap(), BackboneId::Wres50);
}

#[test]
fn checkpoint_round_trip() {
    let dev = Device::Cpu;
    let m = ApprenticeModel::random(BackboneId::Toy, &[1, 2], 9, &dev).unwrap();
    let ck = Checkpoint {
        backbone: BackboneId::Toy,
        hierarchies: vec![1, 2],
        resolution: 32,
        epoch: 4,
        run_config: serde_json::json!({"lr": 2e-4}),
        params: m.snapshot().unwrap(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.safetensors");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path, &dev).unwrap();
    assert_eq!(back.epoch, 4);
    assert_eq!(back.hierarchies, vec![1, 2]);
    assert_eq!(back.run_config["lr"], 2e-4);
    let restored = ApprenticeModel::from_params(
        back.backbone,
        &back.hierarchies,
        back.params.into_iter().collect(),
        &dev,
    )
    .unwrap();
    assert_eq!(restored.param_hash().unwrap(), m.param_hash().unwrap());
}
