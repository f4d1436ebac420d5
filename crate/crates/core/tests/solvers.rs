mod common;

use common::{plan, random_field};
use holounfold::solvers::{
    extract_phase, gradient_step, gs_solve, hqs_unfold_from, objective, DenoiserKind, UnfoldConfig,
};
use holounfold::tensor::{Amplitude, ComplexField};
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_amplitude(n: usize, seed: u64) -> Amplitude<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Amplitude::new(n, n, (0..n * n).map(|_| rng.random_range(0.0..2.0)).collect()).unwrap()
}

fn none_cfg(stages: usize) -> UnfoldConfig {
    UnfoldConfig { stages, denoiser: DenoiserKind::None, ..UnfoldConfig::default() }
}

#[test]
fn step_descends_with_halving() {
    let p = plan(16, 0.002);
    let mut descended = 0;
    for seed in 0..100 {
        let x = random_field(16, 16, seed);
        let y = random_amplitude(16, 1000 + seed);
        let f0 = objective(&x, &y, &p).unwrap();
        if [1.0, 0.5, 0.25].iter().any(|&rho| objective(&gradient_step(&x, &y, &p, rho).unwrap(), &y, &p).unwrap() < f0) {
            descended += 1;
        }
    }
    assert!(descended >= 95, "descent on {descended}/100 instances");
}

#[test]
fn step_direction_is_negative_gradient() {
    for (seed, z) in [(0, 0.002), (1, 0.002), (2, 0.01), (3, 0.05), (4, 0.2)] {
        let p = plan(16, z);
        let x = random_field(16, 16, 50 + seed);
        let y = random_amplitude(16, 60 + seed);
        let step = gradient_step(&x, &y, &p, 1.0).unwrap();
        let h = 1e-6;
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for i in 0..x.len() {
            for bump in [Complex::new(h, 0.0), Complex::new(0.0, h)] {
                let shifted = |s: f64| {
                    let mut d = x.data().to_vec();
                    d[i] += bump * s;
                    objective(&ComplexField::new(16, 16, x.pitch(), d).unwrap(), &y, &p).unwrap()
                };
                let numeric = -(shifted(1.0) - shifted(-1.0)) / (2.0 * h);
                let dir = step.data()[i] - x.data()[i];
                let analytic = if bump.re != 0.0 { dir.re } else { dir.im };
                diff = diff.max((analytic - numeric).abs());
                scale = scale.max(numeric.abs());
            }
        }
        assert!(diff / scale < 1e-4, "seed {seed}: relative error {:e}", diff / scale);
    }
}

#[test]
fn gs_error_is_non_increasing() {
    for seed in 0..4 {
        let p = plan(32, 0.002);
        let y = random_amplitude(32, seed).energy_normalized();
        let out = gs_solve(&y, &p, 40, seed).unwrap();
        for (k, w) in out.errors.windows(2).enumerate() {
            assert!(w[1] <= w[0] + 1e-9, "iteration {k}: {} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn unfolding_without_denoiser_is_plain_descent() {
    let p = plan(32, 0.002);
    let y = random_amplitude(32, 3);
    let x0 = random_field(32, 32, 4);
    let state = hqs_unfold_from(x0.clone(), &y, &p, &none_cfg(4), &[]).unwrap();
    let mut x = x0;
    for _ in 0..4 {
        x = gradient_step(&x, &y, &p, 1.0).unwrap();
    }
    assert_eq!(state.x, x);
    assert_eq!(state.k, 4);
}

#[test]
fn matched_target_is_a_fixed_point() {
    let p = plan(32, 0.002);
    let x0 = random_field(32, 32, 5);
    let y = p.propagate(&x0).unwrap().amplitude();
    let state = hqs_unfold_from(x0.clone(), &y, &p, &none_cfg(1), &[]).unwrap();
    let a = extract_phase(&state.x).unwrap();
    let b = extract_phase(&x0).unwrap();
    let worst = a.phase().iter().zip(b.phase()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-12, "phase moved by {worst:e}");
}
