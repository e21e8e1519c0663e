use poiflow::config::TrainConfig;
use poiflow::dataset::{Dataset, SplitName};
use poiflow::flow::FlowDirection;
use poiflow::model::Model;
use poiflow::synthetic::synthesize;
use poiflow::train::{evaluate, run_training, train, Checkpoint, Prepared, RunPaths};

fn toy() -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    synthesize(&dir.path().join("data"), 9, 21, 7, 4).unwrap();
    let data = Dataset::load(&dir.path().join("data"), FlowDirection::Inflow).unwrap();
    (dir, data)
}

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        lr_switch_epoch: 1,
        window_stride: 8,
        d: 8,
        d_prime: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn one_epoch_over_ten_windows_is_one_update() {
    let (_dir, data) = toy();
    let cfg = TrainConfig {
        epochs: 1,
        ..small_config()
    };
    let mut prep = Prepared::new(&cfg, &data).unwrap();
    assert!(prep.splits.train.len() >= 10);
    prep.splits.train.truncate(10);
    let (model, store) = Model::build(prep.spec.clone(), cfg.seed).unwrap();
    let outcome = train(&cfg, &model, store, &prep).unwrap();
    assert_eq!(outcome.updates, 1);
    assert_eq!(outcome.log.len(), 1);
}

#[test]
fn same_seed_trains_identical_parameters() {
    let (dir, data) = toy();
    let cfg = small_config();
    let a = run_training(&cfg, &data, &dir.path().join("a")).unwrap();
    let b = run_training(&cfg, &data, &dir.path().join("b")).unwrap();
    assert_eq!(a.last, b.last);
    assert_eq!(a.best, b.best);
    assert_eq!(a.log, b.log);
}

#[test]
fn reloaded_best_checkpoint_reproduces_test_metrics() {
    let (dir, data) = toy();
    let cfg = small_config();
    let run = dir.path().join("run");
    let outcome = run_training(&cfg, &data, &run).unwrap();
    let prep = Prepared::new(&cfg, &data).unwrap();
    let (model, mut store) = Model::build(prep.spec.clone(), cfg.seed).unwrap();
    store.assign_from(&outcome.best).unwrap();
    let direct = evaluate(&model, &store, &prep, &prep.splits.test, cfg.batch_size).unwrap();
    let reloaded = Checkpoint::load(&RunPaths::new(&run).best())
        .unwrap()
        .evaluate(&data, SplitName::Test)
        .unwrap();
    assert_eq!(direct.overall.mae, reloaded.overall.mae);
    assert_eq!(direct.samples, reloaded.samples);
    assert!(outcome.best_epoch >= 1 && outcome.best_epoch <= cfg.epochs);
}
