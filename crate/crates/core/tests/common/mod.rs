#![allow(dead_code)]

use std::sync::Arc;

use holounfold::pcd::{PcdConfig, PcdWeights};
use holounfold::propagation::{build_plan, OpticalConfig, PropagationPlan};
use holounfold::tensor::{ComplexField, FeatureMap, Kind, Tensor};
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PITCH: f64 = 8e-6;

pub fn optics(n: usize, distance: f64) -> OpticalConfig {
    OpticalConfig::new(520e-9, PITCH, distance, n, n).unwrap()
}

pub fn plan(n: usize, distance: f64) -> Arc<PropagationPlan<f64>> {
    Arc::new(build_plan(&optics(n, distance)).unwrap())
}

pub fn random_field(h: usize, w: usize, seed: u64) -> ComplexField<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ComplexField::from_fn(h, w, PITCH, |_, _| Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .unwrap()
}

pub fn random_features(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..c * h * w).map(|_| Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
    FeatureMap::new(c, h, w, data).unwrap()
}

/// Weights with every tensor perturbed, including the ones that start at zero
/// or one, so no branch of the denoiser is trivially inactive.
pub fn random_weights(config: PcdConfig, seed: u64, scale: f64) -> PcdWeights<f64> {
    let base = PcdWeights::<f64>::init(config, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let params = base.params.map(|_, t| {
        let data = t
            .data()
            .iter()
            .map(|z| {
                let re = z.re + rng.random_range(-scale..scale);
                let im = if t.kind() == Kind::Complex { z.im + rng.random_range(-scale..scale) } else { 0.0 };
                Complex::new(re, im)
            })
            .collect();
        Tensor::new(t.shape(), data, t.kind()).unwrap()
    });
    PcdWeights { config, params }
}

/// Kernels random, every bias and layer-norm shift zero.
pub fn zero_bias_weights(config: PcdConfig, seed: u64, scale: f64) -> PcdWeights<f64> {
    let w = random_weights(config, seed, scale);
    let params = w.params.map(|name, t| {
        let leaf = name.rsplit('.').next().unwrap();
        if matches!(leaf, "beta" | "b1" | "b2") {
            Tensor::zeros(t.shape(), t.kind())
        } else {
            t.clone()
        }
    });
    PcdWeights { config, params }
}

pub fn to_autodiff(e: holounfold::error::Error) -> holounfold::autodiff::AutodiffError {
    match e {
        holounfold::error::Error::Autodiff(a) => a,
        other => holounfold::autodiff::AutodiffError::Shape { op: "pipeline", detail: other.to_string() },
    }
}

/// Finite-difference check of one unfolding stage (gradient step then
/// denoiser) plus the amplitude loss, with respect to the starting field and
/// every denoiser weight.
pub fn stage_gradcheck(n: usize, channels: usize, seed: u64, max_components: usize) -> holounfold::autodiff::gradcheck::GradCheckReport {
    use holounfold::autodiff::gradcheck::{check_gradients, GradCheckConfig};
    use holounfold::pcd::graph;
    use holounfold::solvers::gradient_step_on_tape;

    let config = PcdConfig { channels, blocks: 1, table_size: 15 };
    let weights = random_weights(config, seed, 0.2);
    let p = plan(n, 0.002);
    let target: Vec<f64> = {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        (0..n * n).map(|_| rng.random_range(0.2..1.5)).collect()
    };
    let x0 = random_field(n, n, seed + 2);
    let mut leaves = vec![Tensor::new(&[1, n, n], x0.data().to_vec(), Kind::Complex).unwrap()];
    leaves.extend(weights.params.named().into_iter().map(|(_, t)| t.clone()));
    let template = weights.params.clone();
    let cfg = GradCheckConfig { max_components: Some(max_components), ..GradCheckConfig::default() };
    check_gradients(
        "one unfolding stage",
        &leaves,
        |tape, vars| {
            let mut rest = vars[1..].iter();
            let params = template.map(|_, _| *rest.next().expect("one var per tensor"));
            let y = tape.constant(Tensor::from_real(&[1, n, n], &target).unwrap());
            let v = gradient_step_on_tape(tape, vars[0], y, &p, 1.0).map_err(to_autodiff)?;
            let x = graph::pcd(tape, v, &params).map_err(to_autodiff)?;
            let u = tape.unit_phase(x);
            let img = tape.propagate(u, &p)?;
            let a = tape.abs(img);
            tape.mse(a, &target)
        },
        &cfg,
    )
    .unwrap()
}
