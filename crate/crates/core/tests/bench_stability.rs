use cdo::report::{cmd_bench, cmd_train, TrainOptions};
use cdo::trainer::{DataConfig, RunConfig};

#[test]
fn repeated_benchmarks_agree_within_a_fifth() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        epochs: 1,
        data: DataConfig::Toy {
            seed: 0,
            n_train: 8,
            n_test_normal: 4,
            n_test_abnormal: 4,
        },
        ..RunConfig::toy()
    };
    let run = cmd_train(
        &cfg,
        &TrainOptions {
            run_dir: Some(tmp.path().join("run")),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    let first = cmd_bench(&run, 40).unwrap();
    let second = cmd_bench(&run, 40).unwrap();
    let ratio = first.fps / second.fps;
    assert!((0.8..=1.25).contains(&ratio), "{} vs {} fps", first.fps, second.fps);
    assert_eq!(first.model_size_mb, second.model_size_mb);
}
