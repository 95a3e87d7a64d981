//! End-to-end training: logging, checkpoint resume, determinism and learning.

use std::fs;
use std::path::Path;

use fusenet_core::data::{Dataset, SceneSpec};
use fusenet_core::detector::{Checkpoint, Detector, ModelConfig};
use fusenet_core::par::Exec;
use fusenet_core::train::{
    evaluate, fit, load_params, TrainConfig, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT, LOG_FILE, LOG_HEADER,
};

fn data(first_seed: u64, count: usize) -> Dataset {
    let spec = SceneSpec {
        min_size_frac: 0.06,
        max_size_frac: 0.20,
        ..Default::default()
    };
    Dataset::synthetic(&spec, first_seed, count, Exec::default()).unwrap()
}

fn train_cfg(epochs: usize, exec: Exec) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        exec,
        ..Default::default()
    }
}

fn read(dir: &Path, file: &str) -> Vec<u8> {
    fs::read(dir.join(file)).unwrap()
}

#[test]
fn two_epochs_write_two_log_rows_and_checkpoints() {
    let train = data(1000, 16);
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(&ModelConfig::default(), &train_cfg(2, Exec::default())).unwrap();
    let s = fit(&mut t, &train, None, Some(dir.path()), |_, _| {}).unwrap();
    assert_eq!(s.logs.len(), 2);
    let log = String::from_utf8(read(dir.path(), LOG_FILE)).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], LOG_HEADER);
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,") && lines[2].starts_with("1,"));
    let ck = Checkpoint::from_bytes(&read(dir.path(), LAST_CHECKPOINT)).unwrap();
    assert_eq!(ck.epoch, 2);
    assert!(
        !dir.path().join(BEST_CHECKPOINT).exists(),
        "best.ckpt needs a validation set"
    );
}

#[test]
fn resuming_reproduces_the_uninterrupted_run() {
    let train = data(2000, 12);
    let cfg = ModelConfig::default();
    let straight_dir = tempfile::tempdir().unwrap();
    let split_dir = tempfile::tempdir().unwrap();
    let mut straight = Trainer::new(&cfg, &train_cfg(3, Exec::default())).unwrap();
    let mut at_two = None;
    // snapshot the outputs as they stood after the second epoch
    fit(&mut straight, &train, None, Some(straight_dir.path()), |row, _| {
        if row.epoch == 1 {
            for f in [LOG_FILE, LAST_CHECKPOINT] {
                fs::copy(straight_dir.path().join(f), split_dir.path().join(f)).unwrap();
            }
            at_two = Some(Checkpoint::load(&straight_dir.path().join(LAST_CHECKPOINT), &cfg).unwrap());
        }
    })
    .unwrap();

    let ck = Checkpoint::load(&split_dir.path().join(LAST_CHECKPOINT), &cfg).unwrap();
    let mut resumed = Trainer::from_checkpoint(&cfg, &train_cfg(3, Exec::default()), &ck).unwrap();
    assert_eq!(resumed.epoch, 2);

    // next-step loss before any further update
    let reference = Trainer::from_checkpoint(&cfg, &train_cfg(3, Exec::default()), &at_two.unwrap()).unwrap();
    let batch = resumed.epoch_order(2, train.len())[..4].to_vec();
    let (_, a) = reference.batch_gradients(&train, &batch).unwrap();
    let mut fresh = Trainer::new(&cfg, &train_cfg(3, Exec::default())).unwrap();
    fresh.run_epoch(&train).unwrap();
    fresh.run_epoch(&train).unwrap();
    let (_, b) = fresh.batch_gradients(&train, &batch).unwrap();
    assert_eq!(a.total.to_bits(), b.total.to_bits());
    let (_, c) = resumed.batch_gradients(&train, &batch).unwrap();
    assert_eq!(a.total.to_bits(), c.total.to_bits());

    fit(&mut resumed, &train, None, Some(split_dir.path()), |_, _| {}).unwrap();
    assert_eq!(read(straight_dir.path(), LOG_FILE), read(split_dir.path(), LOG_FILE));
    assert_eq!(
        read(straight_dir.path(), LAST_CHECKPOINT),
        read(split_dir.path(), LAST_CHECKPOINT)
    );
}

#[test]
fn runs_are_byte_identical_across_repeats_and_policies() {
    let train = data(3000, 10);
    let val = data(4000, 6);
    let mut outputs = Vec::new();
    for exec in [Exec::Parallel, Exec::Parallel, Exec::Sequential] {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(&ModelConfig::default(), &train_cfg(2, exec)).unwrap();
        fit(&mut t, &train, Some(&val), Some(dir.path()), |_, _| {}).unwrap();
        outputs.push([LOG_FILE, LAST_CHECKPOINT, BEST_CHECKPOINT].map(|f| read(dir.path(), f)));
    }
    assert!(outputs[0] == outputs[1], "repeat run differs");
    assert!(outputs[0] == outputs[2], "sequential run differs from parallel");
}

#[test]
fn resume_keeps_a_better_best_checkpoint() {
    let train = data(5000, 8);
    let val = data(6000, 4);
    let cfg = ModelConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(&cfg, &train_cfg(2, Exec::default())).unwrap();
    let first = fit(&mut t, &train, Some(&val), Some(dir.path()), |_, _| {}).unwrap();
    let best_before = read(dir.path(), BEST_CHECKPOINT);
    let ck = Checkpoint::load(&dir.path().join(LAST_CHECKPOINT), &cfg).unwrap();
    let mut resumed = Trainer::from_checkpoint(&cfg, &train_cfg(3, Exec::default()), &ck).unwrap();
    let second = fit(&mut resumed, &train, Some(&val), Some(dir.path()), |_, _| {}).unwrap();
    let prior = first.best_map50.unwrap();
    let latest = second.final_metrics.unwrap().map50;
    if latest > prior {
        assert_ne!(read(dir.path(), BEST_CHECKPOINT), best_before);
    } else {
        assert_eq!(read(dir.path(), BEST_CHECKPOINT), best_before);
    }
    assert_eq!(second.best_map50.unwrap(), prior.max(latest));
}

#[test]
fn training_lowers_the_loss_and_beats_an_untrained_model() {
    let train = data(7000, 32);
    let cfg = ModelConfig::default();
    let mut t = Trainer::new(&cfg, &train_cfg(15, Exec::default())).unwrap();
    let s = fit(&mut t, &train, None, None, |_, _| {}).unwrap();
    let (first, last) = (s.logs[0].loss, s.logs.last().unwrap().loss);
    assert!(last < first, "loss {first} -> {last}");
    let untrained = evaluate(&Detector::new(&cfg, 1).unwrap(), &train, Exec::default()).unwrap();
    let trained = evaluate(&t.model, &train, Exec::default()).unwrap();
    assert!(
        trained.map50 > untrained.map50,
        "trained mAP50 {} vs untrained {}",
        trained.map50,
        untrained.map50
    );
}

#[test]
fn checkpoints_refuse_a_different_architecture() {
    let cfg = ModelConfig::default();
    let t = Trainer::new(&cfg, &train_cfg(1, Exec::default())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    t.checkpoint().save(&path).unwrap();
    let other = ModelConfig {
        fusion: fusenet_core::fusion::FusionConfig::setting(4, 32).unwrap(),
        ..Default::default()
    };
    assert!(Checkpoint::load(&path, &other).is_err());
    let mut m = Detector::new(&cfg, 99).unwrap();
    load_params(&mut m, &Checkpoint::load(&path, &cfg).unwrap()).unwrap();
    assert_eq!(m.store.tensors(), t.model.store.tensors());
}
