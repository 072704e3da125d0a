use std::collections::BTreeMap;

use dcaps::checkpoint;
use dcaps::data::{build_experiment, generate_toy_dataset, rgb_to_tensor};
use dcaps::network::{DCaps, DCapsConfig};
use dcaps::numerics::Tensor;
use dcaps::training::{run_cross_validation, train_fold, Dataset, Samples, TrainConfig};
use dcaps::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy(polyps: usize, per: usize) -> Dataset {
    let d = generate_toy_dataset(polyps, per, 3, 8, 10).unwrap();
    let split = build_experiment(&d.records, 1).unwrap();
    Dataset {
        images: d.images.iter().map(|i| rgb_to_tensor(i, 8, 10)).collect(),
        records: split.records,
        labels: split.labels,
    }
}

/// Dark images for class 0, bright for class 1, with pixel noise.
fn blobs(n: usize) -> (Vec<Tensor<f32>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let images = labels
        .iter()
        .map(|&y| {
            let base = if y == 1 { 0.75 } else { 0.25 };
            Tensor::from_fn(&[8, 10, 3], |_| base + rng.gen_range(-0.1f32..0.1))
        })
        .collect();
    (images, labels)
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let (images, labels) = blobs(10);
    let mut net = DCaps::<f32>::build(DCapsConfig::tiny(), 1).unwrap();
    let before = checkpoint::to_bytes(&net).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..quick(1)
    };
    let all: Vec<usize> = (0..10).collect();
    let samples = Samples { images: &images, labels: &labels };
    let out = train_fold(&mut net, samples, &all, &[], &cfg, 0, None).unwrap();
    assert_eq!(out.log.len(), 1);
    assert_eq!(checkpoint::to_bytes(&net).unwrap(), before);
}

#[test]
fn loss_falls_on_separable_blobs() {
    let (images, labels) = blobs(24);
    let mut net = DCaps::<f32>::build(DCapsConfig::tiny(), 2).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        ..quick(3)
    };
    let all: Vec<usize> = (0..24).collect();
    let samples = Samples { images: &images, labels: &labels };
    let out = train_fold(&mut net, samples, &all, &[], &cfg, 0, None).unwrap();
    let losses: Vec<f64> = out.log.iter().map(|e| e.train_loss).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn zero_epochs_writes_the_initial_checkpoint() {
    let (images, labels) = blobs(4);
    let dir = tempfile::tempdir().unwrap();
    let mut net = DCaps::<f32>::build(DCapsConfig::tiny(), 5).unwrap();
    let initial = checkpoint::to_bytes(&net).unwrap();
    let samples = Samples { images: &images, labels: &labels };
    let out = train_fold(&mut net, samples, &[0, 1, 2, 3], &[], &quick(0), 2, Some(dir.path())).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(out.checkpoints, vec![dir.path().join("fold2_epoch0.ckpt")]);
    assert_eq!(std::fs::read(&out.checkpoints[0]).unwrap(), initial);
}

#[test]
fn checkpoints_at_best_validation_and_final_epoch() {
    let (images, labels) = blobs(16);
    let dir = tempfile::tempdir().unwrap();
    let mut net = DCaps::<f32>::build(DCapsConfig::tiny(), 5).unwrap();
    let samples = Samples { images: &images, labels: &labels };
    let train: Vec<usize> = (0..12).collect();
    let out = train_fold(&mut net, samples, &train, &[12, 13, 14, 15], &quick(3), 0, Some(dir.path())).unwrap();
    let (best, _) = out.best_validation.unwrap();
    assert!(out.checkpoints.contains(&dir.path().join("fold0_epoch3.ckpt")));
    assert!(out.checkpoints.contains(&dir.path().join(format!("fold0_epoch{best}.ckpt"))));
    let last: DCaps<f32> = checkpoint::load(&dir.path().join("fold0_epoch3.ckpt")).unwrap();
    assert_eq!(checkpoint::to_bytes(&last).unwrap(), checkpoint::to_bytes(&net).unwrap());
}

#[test]
fn empty_training_set_is_an_error() {
    let (images, labels) = blobs(4);
    let mut net = DCaps::<f32>::build(DCapsConfig::tiny(), 5).unwrap();
    let samples = Samples { images: &images, labels: &labels };
    assert!(train_fold(&mut net, samples, &[], &[], &quick(1), 0, None).is_err());
}

#[test]
fn nonfinite_loss_names_the_batch() {
    let (mut images, labels) = blobs(8);
    images[5].data_mut()[0] = f32::NAN;
    let mut net = DCaps::<f32>::build(DCapsConfig::tiny(), 5).unwrap();
    let samples = Samples { images: &images, labels: &labels };
    let all: Vec<usize> = (0..8).collect();
    let err = train_fold(&mut net, samples, &all, &[], &quick(1), 0, None).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::NonFinite(_)), "{msg}");
    assert!(msg.contains("batch indices") && msg.contains('5'), "{msg}");
}

#[test]
fn two_folds_hold_out_every_polyp_once() {
    let data = toy(4, 2);
    let cfg = TrainConfig {
        fold_count: 2,
        ..quick(1)
    };
    let cv = run_cross_validation(&data, &DCapsConfig::tiny(), &cfg, None).unwrap();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for f in &cv.folds {
        let polyps: std::collections::BTreeSet<&str> = f.votes.iter().map(|v| v.polyp_id.as_str()).collect();
        for p in polyps {
            *seen.entry(p.to_string()).or_default() += 1;
        }
    }
    assert_eq!(seen.len(), 4);
    assert!(seen.values().all(|&c| c == 1));
    assert_eq!(cv.pooled.column("All Polyps").unwrap().count, 4);
    assert_eq!(cv.pooled.column("All Images").unwrap().count, 8);
}

#[test]
fn cross_validation_is_deterministic() {
    let data = toy(6, 2);
    let cfg = TrainConfig {
        fold_count: 3,
        seed: 9,
        ..quick(2)
    };
    let a = run_cross_validation(&data, &DCapsConfig::tiny(), &cfg, None).unwrap();
    let b = run_cross_validation(&data, &DCapsConfig::tiny(), &cfg, None).unwrap();
    assert_eq!(a.pooled.to_json().unwrap(), b.pooled.to_json().unwrap());
    assert_eq!(a.recon_mse(), b.recon_mse());
}

#[test]
fn no_recon_and_routing_overrides_apply() {
    let cfg = TrainConfig {
        no_recon: true,
        routing: Some(5),
        ..TrainConfig::default()
    };
    let c = cfg.apply(&DCapsConfig::desk());
    assert!(!c.recon_enabled);
    let depths: Vec<usize> = c.layer_specs.iter().map(|s| s.routing_iterations).collect();
    assert_eq!(depths, vec![1, 5, 5, 5, 5, 5]);
    let bad = TrainConfig {
        batch_size: 0,
        ..TrainConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}
