//! Seeded training, checkpoint round trips and scoring of predictions.

mod common;

use bifuser::eval::r_rule;
use bifuser::model::{fit, Checkpoint, TrainConfig};
use bifuser::{BiFuser, ModelConfig, Point};
use common::synthetic_samples;

fn short() -> TrainConfig {
    TrainConfig { epochs: 2, max_steps: Some(4), validate_every: 1, ..TrainConfig::smoke() }
}

#[test]
fn same_seed_same_losses() {
    let train = synthetic_samples(4, 64, 1);
    let run = || {
        let mut model = BiFuser::<f32>::new(ModelConfig::tiny(64), 3).unwrap();
        fit(&mut model, &train, &[], &short(), None).unwrap().losses
    };
    let (a, b) = (run(), run());
    assert_eq!(a.len(), 4);
    assert_eq!(a, b);
}

#[test]
fn best_checkpoint_reloads_to_identical_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let train = synthetic_samples(4, 64, 2);
    let val = synthetic_samples(2, 64, 3);
    let mut model = BiFuser::<f32>::new(ModelConfig::tiny(64), 4).unwrap();
    let report = fit(&mut model, &train, &val, &short(), Some(&path)).unwrap();
    let loaded = Checkpoint::load::<f32>(&path).unwrap();
    assert_eq!(loaded.header.epoch, report.best_epoch);
    assert!(loaded.optimizer.is_some());
    assert_eq!(loaded.model.normalization, model.normalization);
    let refs: Vec<_> = val.iter().collect();
    let a = model.predict(&refs, 0.5).unwrap();
    let b = loaded.model.predict(&refs, 0.5).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.original, y.original);
    }
}

#[test]
fn perfect_predictions_score_full_marks() {
    let samples = synthetic_samples(5, 64, 5);
    let gts: Vec<_> = samples.iter().map(|s| s.annotation.clone()).collect();
    let preds: Vec<Point> = gts.iter().map(|g| g.fovea).collect();
    let report = r_rule(&preds, &gts).unwrap();
    assert_eq!(report.accuracies, [100.0; 4]);
    assert_eq!(report.mean_error_px, 0.0);
}
