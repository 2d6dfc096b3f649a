use gaussclust::checkpoint::{load_model, TrainState};
use gaussclust::datasets::{make_synthetic_shapes, Dataset, TransformConfig};
use gaussclust::error::Error;
use gaussclust::model::{Model, ModelConfig};
use gaussclust::pseudo_targets::{batched_label_features, compute_pseudo_targets};
use gaussclust::trainer::{final_inference, resume, RunLog, StepOutcome, TrainConfig, Trainer};

fn data() -> Dataset {
    make_synthetic_shapes(3, 8, 32, 11).unwrap()
}

fn model(seed: u64) -> Model {
    Model::new(ModelConfig::small(32, 1, 3), seed).unwrap()
}

fn config() -> TrainConfig {
    TrainConfig { epochs: 2, macro_batch: 12, sub_batch: 5, mini_batch: 4, seed: 9, ..Default::default() }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let data = data();
    let mut full = Trainer::new(&data, model(1), config()).unwrap();
    full.run().unwrap();
    let expected = full.state();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    let mut first = Trainer::new(&data, model(1), config()).unwrap();
    // stop inside a macro-batch so the frozen pseudo-targets are exercised
    for _ in 0..7 {
        assert!(matches!(first.step().unwrap(), StepOutcome::Stepped(_)));
    }
    first.state().save(&path).unwrap();
    drop(first);

    let mut second = resume(&path, &data).unwrap();
    second.run().unwrap();
    let got = second.state();
    assert_eq!(got.params, expected.params);
    assert_eq!(got.adam, expected.adam);
    assert_eq!(got.global_step, expected.global_step);
    assert_eq!(got.history, expected.history);
}

#[test]
fn checkpoint_reload_is_bit_identical() {
    let data = data();
    let mut trainer = Trainer::new(&data, model(2), TrainConfig { epochs: 1, ..config() }).unwrap();
    trainer.run().unwrap();
    let state = trainer.state();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    state.save(&path).unwrap();
    let back = TrainState::load(&path).unwrap();
    assert_eq!(back, state);
    let reloaded = load_model(&path).unwrap();
    let ids = final_inference(trainer.model(), &data, 7).unwrap();
    assert_eq!(final_inference(&reloaded, &data, 7).unwrap(), ids);
    let a = gaussclust::trainer::label_features(trainer.model(), &data, 24).unwrap();
    let b = gaussclust::trainer::label_features(&reloaded, &data, 3).unwrap();
    assert_eq!(a, b);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let data = data();
    let trainer = Trainer::new(&data, model(3), config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    trainer.state().save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(TrainState::load(&path), Err(Error::Checkpoint(_))));
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(TrainState::load(&path).is_err());
}

#[test]
fn resume_on_other_dataset_is_incompatible() {
    let data = data();
    let mut trainer = Trainer::new(&data, model(4), config()).unwrap();
    trainer.step().unwrap();
    let other = make_synthetic_shapes(3, 9, 32, 11).unwrap();
    assert!(Trainer::from_state(&other, trainer.state()).is_err());
}

#[test]
fn step_one_features_do_not_depend_on_the_split() {
    let data = data();
    let net = model(5);
    let indices: Vec<usize> = (0..data.len()).rev().collect();
    let whole = batched_label_features(&net, &data, &indices, indices.len()).unwrap();
    for m1 in [1, 7] {
        let split = batched_label_features(&net, &data, &indices, m1).unwrap();
        let diff = (&split - &whole).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(diff < 1e-6, "m1 = {m1}: {diff}");
    }
    let a = compute_pseudo_targets(&net, &data, &indices, 1, 3, 4).unwrap();
    let b = compute_pseudo_targets(&net, &data, &indices, 24, 3, 4).unwrap();
    assert_eq!(a.relations, b.relations);
}

#[test]
fn step_one_holds_at_most_m1_images() {
    let data = data();
    let mut trainer = Trainer::new(&data, model(6), TrainConfig { epochs: 1, ..config() }).unwrap();
    trainer.run().unwrap();
    assert!(trainer.step1_peak_images() >= 1);
    assert!(trainer.step1_peak_images() <= 5);
}

#[test]
fn run_log_writes_losses_and_final_checkpoint() {
    let data = data();
    let dir = tempfile::tempdir().unwrap();
    let log = RunLog::open(dir.path()).unwrap();
    let mut trainer = Trainer::new(&data, model(7), TrainConfig { epochs: 1, ..config() }).unwrap().with_log(log);
    trainer.run().unwrap();
    let losses = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert_eq!(losses.lines().count() as u64, 1 + trainer.global_step());
    let epochs = std::fs::read_to_string(dir.path().join("epochs.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(epochs.lines().next().unwrap()).unwrap();
    assert!(first["report"]["acc"].as_f64().unwrap() > 0.0);
    assert!(dir.path().join("checkpoints/final.ckpt").exists());
}

#[test]
fn invalid_training_configs_fail_early() {
    let data = data();
    let too_big = TrainConfig { macro_batch: 12, mini_batch: 13, ..config() };
    assert!(matches!(Trainer::new(&data, model(8), too_big), Err(Error::InvalidConfig(_))));
    let bad_lr = TrainConfig { learning_rate: 0.0, ..config() };
    assert!(Trainer::new(&data, model(8), bad_lr).is_err());
    let identity = TrainConfig { transform: TransformConfig::identity(), epochs: 1, ..config() };
    assert!(Trainer::new(&data, model(8), identity).is_ok());
}
