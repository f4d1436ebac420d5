mod common;

use common::{random_features, random_field, random_weights, zero_bias_weights};
use holounfold::error::Error;
use holounfold::pcd::{
    cdsa_detailed, cdsa_forward, compute_offsets, fem_forward, pcd_forward, AttentionGeometry, PcdConfig, PcdWeights,
};
use holounfold::tensor::{hermitian_inner, ComplexField};
use num_complex::Complex;
use proptest::prelude::*;

fn cfg(channels: usize) -> PcdConfig {
    PcdConfig { channels, blocks: 1, table_size: 15 }
}

#[test]
fn feature_extraction_shapes() {
    let w = random_weights(cfg(8), 1, 0.1);
    let f = fem_forward(&random_field(64, 96, 2), &w).unwrap();
    assert_eq!((f.channels(), f.height(), f.width()), (8, 16, 24));
    let out = pcd_forward(&random_field(64, 96, 3), &w).unwrap();
    assert_eq!(out.dims(), (64, 96));
}

#[test]
fn zero_field_maps_to_zero() {
    let w = zero_bias_weights(cfg(8), 4, 0.1);
    let z = ComplexField::zeros(64, 64, common::PITCH).unwrap();
    let out = pcd_forward(&z, &w).unwrap();
    assert!(out.data().iter().all(|v| v.norm() == 0.0));
}

#[test]
fn indivisible_input_names_nearest_size() {
    let w = PcdWeights::<f64>::init(cfg(4), 0);
    let err = pcd_forward(&random_field(100, 100, 0), &w).unwrap_err();
    assert!(matches!(err, Error::Indivisible { suggested_height: 128, suggested_width: 128, .. }));
    assert!(err.to_string().contains("128x128"), "{err}");
}

#[test]
fn identity_at_initialization() {
    for seed in 0..3 {
        let w = PcdWeights::<f64>::init(cfg(8), seed);
        let v = random_field(64, 64, seed + 10);
        assert_eq!(pcd_forward(&v, &w).unwrap().max_abs_diff(&v), 0.0);
    }
}

#[test]
fn attention_matrix_is_reduced_by_sixty_four() {
    // A 128x128 field gives a 32x32 feature map: 1024 queries.
    let geometry = AttentionGeometry::new(32, 32);
    assert_eq!(geometry.num_queries(), 1024);
    assert_eq!(geometry.rate(), 64);
    let w = random_weights(cfg(8), 5, 0.1);
    let out = cdsa_detailed(&random_features(8, 32, 32, 6), &w.params.blocks[0], None).unwrap();
    assert_eq!(out.attention.shape(), &[1024, 16]);
    assert_eq!(out.offsets.shape(), &[2, 4, 4]);
}

#[test]
fn attention_rows_are_stochastic() {
    let w = random_weights(cfg(8), 7, 0.3);
    let out = cdsa_detailed(&random_features(8, 16, 16, 8), &w.params.blocks[0], None).unwrap();
    let &[nq, nk] = out.attention.shape() else { panic!("attention must be 2-D") };
    for i in 0..nq {
        let row = &out.attention.data()[i * nk..(i + 1) * nk];
        assert!(row.iter().all(|a| a.im == 0.0 && a.re >= 0.0));
        let sum: f64 = row.iter().map(|a| a.re).sum();
        assert!((sum - 1.0).abs() < 1e-12, "row {i} sums to {sum}");
    }
}

#[test]
fn cdsa_global_phase_equivariance() {
    let w = random_weights(cfg(8), 9, 0.3);
    let block = &w.params.blocks[0];
    let f = random_features(8, 16, 16, 10);
    let offsets = compute_offsets(&f, block).unwrap();
    let base = cdsa_detailed(&f, block, Some(&offsets)).unwrap();
    for theta in [0.3, 1.7, -2.9] {
        let rot = Complex::from_polar(1.0, theta);
        let turned = cdsa_detailed(&f.scaled_by(rot), block, Some(&offsets)).unwrap();
        let attn = base.attention.data().iter().zip(turned.attention.data()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(attn < 1e-12, "attention moved by {attn:e}");
        let diff = turned.output.max_abs_diff(&base.output.scaled_by(rot));
        assert!(diff < 1e-10, "output off by {diff:e}");
    }
}

#[test]
fn cdsa_forward_matches_detailed() {
    let w = random_weights(cfg(4), 11, 0.2);
    let f = random_features(4, 16, 16, 12);
    let a = cdsa_forward(&f, &w.params.blocks[0]).unwrap();
    let b = cdsa_detailed(&f, &w.params.blocks[0], None).unwrap().output;
    assert_eq!(a, b);
}

#[test]
fn parameter_count_report() {
    // Hand count at C = 32, one block: complex kernels count twice.
    let c = 32;
    let complex = c * 9 + c * c * 9 + c * c * 9 + c * 9 // fem and pirm convolutions
        + 4 * c // layer-norm affines
        + 3 * c * c // q, k, v projections
        + 2 * 4 * c * c + 4 * c + c; // feed-forward
    let real = 2 * c * 81 + 2 * 2 * c + 2 * 2 * c + 15 * 15;
    let per_stage = 2 * complex + real;
    let w = PcdWeights::<f64>::init(cfg(c), 0);
    assert_eq!(w.parameter_count(), per_stage);
    let total = 3 * w.parameter_count();
    println!("3-stage denoiser parameters at C=32: {total} (reference model: 19430, ratio {:.2})", total as f64 / 19430.0);
    assert_eq!(total, 200_355);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn hermitian_inner_rotation_invariant(seed in any::<u64>(), theta in -10.0f64..10.0) {
        let x = random_field(8, 8, seed);
        let y = random_field(8, 8, seed.wrapping_add(1));
        let rot = Complex::from_polar(1.0, theta);
        let xr: Vec<_> = x.data().iter().map(|z| z * rot).collect();
        let yr: Vec<_> = y.data().iter().map(|z| z * rot).collect();
        let a = hermitian_inner(x.data(), y.data()).unwrap();
        let b = hermitian_inner(&xr, &yr).unwrap();
        prop_assert!((a - b).norm() < 1e-12 * a.norm().max(1.0));
    }
}
