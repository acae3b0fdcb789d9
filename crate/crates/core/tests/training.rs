mod common;

use common::small_scene;
use eon_core::detector::{
    detect, load_checkpoint, mean_losses, scene_loss, read_manifest, read_train_log, resume, train, DetectorConfig, OptimizerKind, Precision,
    Variant,
};
use eon_core::scenegen::{generate_scene, Scene, SceneGenConfig};
use eon_core::EonError;

fn scenes(n: u64) -> Vec<Scene> {
    (0..n).map(|i| small_scene(500 + i)).collect()
}

fn config(variant: Variant, epochs: usize) -> DetectorConfig {
    DetectorConfig {
        variant,
        epochs,
        num_regions: 8,
        ..DetectorConfig::default()
    }
}

fn dataset_loss(checkpoint: &std::path::Path, data: &[Scene]) -> f64 {
    let (model, _, _) = load_checkpoint::<f32>(checkpoint).unwrap();
    let values: Vec<_> = data.iter().map(|s| scene_loss(&model, s).unwrap()).collect();
    mean_losses(&values).total
}

/// Momentum SGD: under Adam the mean-over-positives terms of eon grow for
/// the first epochs on eight scenes while the positive set settles.
#[test]
fn loss_decreases_over_two_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let gen = SceneGenConfig::default();
    let data: Vec<Scene> = (0..8).map(|i| generate_scene(&gen, i).unwrap()).collect();
    for variant in [Variant::Baseline, Variant::Eon] {
        let cfg = DetectorConfig {
            variant,
            epochs: 2,
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.01,
            ..DetectorConfig::default()
        };
        let out = train::<f32>(&cfg, &data, &dir.path().join(variant.name()), 1).unwrap();
        assert_eq!(out.log.len(), 3);
        let before = out.log[0].total;
        assert!(out.log[2].total < before, "{variant}: {before} -> {}", out.log[2].total);
        let after = dataset_loss(&out.checkpoint, &data);
        assert!(after < before, "{variant}: {before} -> {after}");
    }
}

#[test]
fn log_file_matches_returned_log() {
    let dir = tempfile::tempdir().unwrap();
    let out = train::<f32>(&config(Variant::Eon, 1), &scenes(2), dir.path(), 1).unwrap();
    let on_disk = read_train_log(&dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(on_disk, out.log);
    assert_eq!(read_manifest(&out.checkpoint).unwrap().epochs_completed, 1);
}

#[test]
fn checkpoint_roundtrip_preserves_detections() {
    let dir = tempfile::tempdir().unwrap();
    let data = scenes(2);
    let cfg = DetectorConfig { precision: Precision::F32, ..config(Variant::Eon, 1) };
    let out = train::<f32>(&cfg, &data, &dir.path().join("f32"), 1).unwrap();
    let (a, _, _) = load_checkpoint::<f32>(&out.checkpoint).unwrap();
    let (b, _, _) = load_checkpoint::<f32>(&out.checkpoint).unwrap();
    assert_eq!(detect(&a, &data[0]).unwrap(), detect(&b, &data[0]).unwrap());

    let cfg = DetectorConfig { precision: Precision::F64, ..cfg };
    let out = train::<f64>(&cfg, &data, &dir.path().join("f64"), 1).unwrap();
    let (a, _, manifest) = load_checkpoint::<f64>(&out.checkpoint).unwrap();
    assert_eq!(manifest.config.precision, Precision::F64);
    assert_eq!(manifest.parameter_count, a.parameter_count());
    let (b, _, _) = load_checkpoint::<f64>(&out.checkpoint).unwrap();
    assert_eq!(detect(&a, &data[1]).unwrap(), detect(&b, &data[1]).unwrap());
}

#[test]
fn resumed_training_equals_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let data = scenes(3);
    for optimizer in [OptimizerKind::Adam, OptimizerKind::Sgd] {
        let cfg = DetectorConfig { optimizer, ..config(Variant::Eon, 2) };
        let full = dir.path().join(format!("{optimizer:?}_full"));
        let split = dir.path().join(format!("{optimizer:?}_split"));
        train::<f32>(&cfg, &data, &full, 1).unwrap();
        train::<f32>(&DetectorConfig { epochs: 1, ..cfg.clone() }, &data, &split, 1).unwrap();
        let resumed = resume::<f32>(&split, 2, &data, 1).unwrap();
        assert_eq!(resumed.log.len(), 1);
        let read = |d: &std::path::Path| std::fs::read(d.join("checkpoint/params.bin")).unwrap();
        assert_eq!(read(&full), read(&split), "{optimizer:?}");
        let totals = |d: &std::path::Path| -> Vec<f64> {
            read_train_log(&d.join("train_log.jsonl")).unwrap().iter().map(|e| e.total).collect()
        };
        assert_eq!(totals(&full), totals(&split));
    }
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = scenes(2);
    let cfg = config(Variant::Eon, 1);
    train::<f32>(&cfg, &data, &dir.path().join("a"), 1).unwrap();
    train::<f32>(&cfg, &data, &dir.path().join("b"), 1).unwrap();
    let read = |n: &str| std::fs::read(dir.path().join(n).join("checkpoint/params.bin")).unwrap();
    assert_eq!(read("a"), read("b"));
}

#[test]
fn divergent_update_reports_non_finite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DetectorConfig {
        learning_rate: 1e40,
        optimizer: OptimizerKind::Sgd,
        ..config(Variant::Eon, 1)
    };
    let err = train::<f32>(&cfg, &scenes(1), dir.path(), 1).unwrap_err();
    assert!(matches!(err, EonError::NonFinite { .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn mismatched_scene_group_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DetectorConfig { group_order: 8, ..config(Variant::Eon, 1) };
    let err = train::<f32>(&cfg, &scenes(1), dir.path(), 1).unwrap_err();
    assert!(matches!(err, EonError::GroupMismatch { .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn corrupted_checkpoint_fails_to_load() {
    let dir = tempfile::tempdir().unwrap();
    let out = train::<f32>(&config(Variant::Eon, 0), &scenes(1), dir.path(), 1).unwrap();
    let params = out.checkpoint.join("params.bin");
    let bytes = std::fs::read(&params).unwrap();
    std::fs::write(&params, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_checkpoint::<f32>(&out.checkpoint).is_err());
}
