mod common;

use std::sync::Arc;

use common::plan;
use holounfold::dataset::{synthetic_image, Sample};
use holounfold::pcd::{load_weights, save_weights, PcdConfig, PcdWeights};
use holounfold::propagation::{build_plan, PropagationPlan};
use holounfold::solvers::{init_field, UnfoldConfig};
use holounfold::tensor::{Amplitude, ComplexField};
use holounfold::train::{init_stages, solver_target, train, training_loss, validate_weights, LogRow, TrainConfig};
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> PcdConfig {
    PcdConfig { channels: 4, blocks: 1, table_size: 15 }
}

fn samples(count: usize, n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|i| Sample { id: format!("s{i}"), image: synthetic_image(&mut rng, n, n) }).collect()
}

fn unfold(stages: usize) -> UnfoldConfig {
    UnfoldConfig { stages, ..UnfoldConfig::default() }
}

#[test]
fn loss_vanishes_at_a_constructed_fixed_point() {
    let p = plan(32, 0.002);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let u0 = ComplexField::from_fn(32, 32, common::PITCH, |_, _| Complex::from_polar(1.0, rng.random_range(0.0..6.28)))
        .unwrap();
    let y: Amplitude<f64> = p.propagate(&u0).unwrap().amplitude();
    let w = init_stages::<f64>(small(), 2, 0);
    let loss = training_loss(&w, &y, &u0, &p, &unfold(2)).unwrap();
    assert!(loss < 1e-24, "loss {loss:e}");
}

#[test]
fn loss_ignores_global_phase() {
    let p = plan(32, 0.002);
    let img = &samples(1, 32, 2)[0].image;
    let y = solver_target::<f64>(img);
    let x0 = init_field(&y, &p, 3).unwrap();
    let w = init_stages::<f64>(small(), 2, 4);
    let base = training_loss(&w, &y, &x0, &p, &unfold(2)).unwrap();
    for theta in [0.4, 2.2, -1.3] {
        let rot = Complex::from_polar(1.0, theta);
        let turned = x0.map(|z| z * rot).unwrap();
        let loss = training_loss(&w, &y, &turned, &p, &unfold(2)).unwrap();
        assert!((loss - base).abs() < 1e-12 * base, "{loss} vs {base}");
    }
}

#[test]
fn loss_decreases_over_ten_steps() {
    let p = plan(64, 0.002);
    let set = samples(1, 64, 5);
    let cfg = TrainConfig { learning_rate: 1e-4, epochs: 10, ..TrainConfig::default() };
    let out = train(&set, &[], &p, &cfg, &unfold(3), small(), |_| {}).unwrap();
    let losses: Vec<f64> = out.log.iter().map(|r| r.loss).collect();
    assert_eq!(losses.len(), 10);
    assert!(losses[9] < losses[0], "{losses:?}");
}

#[test]
fn training_is_deterministic() {
    let p = plan(32, 0.002);
    let set = samples(3, 32, 6);
    let cfg = TrainConfig { learning_rate: 1e-3, epochs: 2, batch_size: 2, seed: 9, ..TrainConfig::default() };
    let a = train(&set, &set[..1], &p, &cfg, &unfold(2), small(), |_| {}).unwrap();
    let b = train(&set, &set[..1], &p, &cfg, &unfold(2), small(), |_| {}).unwrap();
    assert_eq!(a.weights, b.weights);
    let strip = |log: &[LogRow]| log.iter().map(|r| (r.epoch, r.step, r.loss, r.val_psnr)).collect::<Vec<_>>();
    assert_eq!(strip(&a.log), strip(&b.log));
    assert_eq!(a.log.last().unwrap().step, 4);
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let p = plan(32, 0.002);
    let set = samples(2, 32, 7);
    let cfg = TrainConfig { learning_rate: 0.0, epochs: 2, seed: 3, ..TrainConfig::default() };
    let out = train(&set, &[], &p, &cfg, &unfold(2), small(), |_| {}).unwrap();
    assert_eq!(out.weights, init_stages::<f64>(small(), 2, 3));
}

#[test]
fn saved_weights_reproduce_validation_scores() {
    let optics = common::optics(32, 0.002);
    let p: Arc<PropagationPlan<f32>> = Arc::new(build_plan(&optics).unwrap());
    let set = samples(4, 32, 8);
    let (train_set, val) = set.split_at(3);
    let cfg = TrainConfig { learning_rate: 1e-3, epochs: 2, ..TrainConfig::default() };
    let out = train(train_set, val, &p, &cfg, &unfold(2), small(), |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.cghw");
    save_weights(&path, &out.weights).unwrap();
    let loaded: Vec<PcdWeights<f32>> = load_weights(&path).unwrap();
    assert_eq!(loaded, out.weights);
    let a = validate_weights(val, &out.weights, &p, &unfold(2), cfg.seed).unwrap();
    let b = validate_weights(val, &loaded, &p, &unfold(2), cfg.seed).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.0, out.log.last().unwrap().val_psnr);
}
