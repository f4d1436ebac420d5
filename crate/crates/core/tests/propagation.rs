mod common;

use holounfold::propagation::{asm_threshold, build_plan, far_threshold, select_regime, OpticalConfig, PropagationPlan, Regime};
use holounfold::tensor::{ifft2, ComplexField};
use num_complex::Complex;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Measured relative L2 gap between neighbouring branches at a threshold.
const CONTINUITY_Z1: f64 = 1e-3;
const CONTINUITY_Z2: f64 = 1e-9;

fn band_limited(n: usize, keep: usize, seed: u64) -> ComplexField<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spectrum = ComplexField::from_fn(n, n, common::PITCH, |r, c| {
        if r.min(n - r) < keep && c.min(n - c) < keep {
            Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        } else {
            Complex::new(0.0, 0.0)
        }
    })
    .unwrap();
    ifft2(&spectrum).unwrap()
}

fn relative_gap(cfg: &OpticalConfig, a: Regime, b: Regime, field: &ComplexField<f64>) -> f64 {
    let pa: PropagationPlan<f64> = PropagationPlan::with_regime(cfg, a).unwrap();
    let pb: PropagationPlan<f64> = PropagationPlan::with_regime(cfg, b).unwrap();
    let (ya, yb) = (pa.propagate(field).unwrap(), pb.propagate(field).unwrap());
    let diff: f64 = ya.data().iter().zip(yb.data()).map(|(u, v)| (u - v).norm_sqr()).sum();
    (diff / ya.energy()).sqrt()
}

#[test]
fn branches_agree_near_the_asm_threshold() {
    let base = common::optics(128, 0.0);
    let z1 = asm_threshold(&base).unwrap();
    let field = band_limited(128, 8, 1);
    for z in [z1 * (1.0 - 1e-3), z1 * (1.0 + 1e-3)] {
        let gap = relative_gap(&base.with_distance(z), Regime::Asm, Regime::IrMid, &field);
        println!("ASM vs IR_MID at z = {z:.6} m: relative gap {gap:.3e}");
        assert!(gap < CONTINUITY_Z1, "{gap}");
    }
}

#[test]
fn branches_agree_near_the_far_threshold() {
    let base = common::optics(128, 0.0);
    let z2 = far_threshold(&base).unwrap();
    let field = band_limited(128, 8, 2);
    for z in [z2 * (1.0 - 1e-3), z2 * (1.0 + 1e-3)] {
        let gap = relative_gap(&base.with_distance(z), Regime::IrMid, Regime::IrFar, &field);
        println!("IR_MID vs IR_FAR at z = {z:.6} m: relative gap {gap:.3e}");
        assert!(gap < CONTINUITY_Z2, "{gap}");
    }
}

#[test]
fn far_regime_keeps_band_limited_energy() {
    let base = common::optics(128, 0.0);
    let z = far_threshold(&base).unwrap() * 1.01;
    let plan = build_plan::<f64>(&base.with_distance(z)).unwrap();
    assert_eq!(plan.regime(), Regime::IrFar);
    let field = band_limited(128, 8, 3);
    let ratio = plan.propagate(&field).unwrap().energy() / field.energy();
    println!("IR_FAR energy ratio just above z2: {ratio:.5}");
    assert!(ratio >= 0.99, "{ratio}");
}

#[test]
fn regime_switches_exactly_at_thresholds() {
    let base = common::optics(128, 0.0);
    let (z1, z2) = (asm_threshold(&base).unwrap(), far_threshold(&base).unwrap());
    let at = |z: f64| build_plan::<f64>(&base.with_distance(z)).unwrap().regime();
    assert_eq!(at(z1), Regime::Asm);
    assert_eq!(at(z1.next_up()), Regime::IrMid);
    assert_eq!(at(z2), Regime::IrMid);
    assert_eq!(at(z2.next_up()), Regime::IrFar);
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn dispatch_is_exhaustive_and_exclusive(z in 1e-6f64..5.0, n in prop::sample::select(vec![64usize, 256, 1920])) {
        let cfg = OpticalConfig { width: n, height: n.min(1080), ..OpticalConfig::default() }.with_distance(z);
        let (z1, z2) = (asm_threshold(&cfg).unwrap(), far_threshold(&cfg).unwrap());
        prop_assert!(z2 > z1);
        let r = select_regime(z, z1, z2);
        let expected = [(z <= z1, Regime::Asm), (z1 < z && z <= z2, Regime::IrMid), (z > z2, Regime::IrFar)];
        prop_assert_eq!(expected.iter().filter(|(hit, _)| *hit).count(), 1);
        prop_assert_eq!(expected.iter().find(|(hit, _)| *hit).unwrap().1, r);
    }
}
