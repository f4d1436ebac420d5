//! End-to-end training of the unfolded solver.
//!
//! Each sample runs every stage on one tape, takes the phase of the final
//! iterate, re-propagates the unit-amplitude field and scores the amplitude
//! against the target with a mean squared error. Quantization is applied only
//! at evaluation time.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::grayscale::Gray8;
use crate::metrics::{psnr, ssim};
use crate::pcd::{graph, PcdConfig, PcdParams, PcdWeights};
use crate::propagation::PropagationPlan;
use crate::scalar::Real;
use crate::solvers::{
    extract_phase, hqs_unfold_from, init_field, reconstruct, unfold_on_tape, DenoiserKind, Hologram, UnfoldConfig,
};
use crate::tensor::{Amplitude, ComplexField, Kind, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Trailing share of the sorted dataset held out for validation.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 30,
            batch_size: 1,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            validation_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be non-negative, got {}", self.learning_rate));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return bad(format!("invalid Adam moments ({}, {}, {})", self.beta1, self.beta2, self.epsilon));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!("validation fraction {} outside [0, 1)", self.validation_fraction));
        }
        Ok(())
    }
}

/// Amplitude target handed to every solver: the image scaled to the energy of
/// a unit-amplitude field of the same size.
pub fn solver_target<T: Real>(image: &Gray8) -> Amplitude<T> {
    image.to_amplitude::<T>().energy_normalized()
}

/// Seed of the random initial phase used for sample `index`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn check_denoiser(cfg: &UnfoldConfig, weights: usize) -> Result<()> {
    cfg.validate()?;
    if cfg.denoiser != DenoiserKind::Pcd {
        return Err(Error::Config(format!("training requires the pcd denoiser, got {}", cfg.denoiser)));
    }
    if weights != cfg.stages {
        return Err(Error::StageMismatch { stages: cfg.stages, weights });
    }
    Ok(())
}

/// Records the loss for one sample given the stage parameters on the tape.
pub fn loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    stage_params: &[PcdParams<Var>],
    x0: &ComplexField<T>,
    y: &Amplitude<T>,
    plan: &Arc<PropagationPlan<T>>,
    rho: T,
) -> Result<Var> {
    let (h, w) = x0.dims();
    let x0 = tape.constant(Tensor::new(&[1, h, w], x0.data().to_vec(), Kind::Complex)?);
    let x = unfold_on_tape(tape, x0, y, plan, rho, stage_params)?;
    let u = tape.unit_phase(x);
    let p = tape.propagate(u, plan)?;
    let r = tape.abs(p);
    Ok(tape.mse(r, y.data())?)
}

/// Unquantized amplitude MSE after the full unfolding from `x0`.
pub fn training_loss<T: Real>(
    weights: &[PcdWeights<T>],
    y: &Amplitude<T>,
    x0: &ComplexField<T>,
    plan: &Arc<PropagationPlan<T>>,
    cfg: &UnfoldConfig,
) -> Result<T> {
    check_denoiser(cfg, weights.len())?;
    let mut tape = Tape::new();
    let params: Vec<_> = weights.iter().map(|w| graph::load_params(&mut tape, w, false)).collect();
    let loss = loss_on_tape(&mut tape, &params, x0, y, plan, T::lit(cfg.rho))?;
    Ok(tape.value(loss).data()[0].re)
}

/// Loss and per-tensor gradients for every stage, in [`PcdParams::named`] order.
pub fn loss_and_gradients<T: Real>(
    weights: &[PcdWeights<T>],
    y: &Amplitude<T>,
    x0: &ComplexField<T>,
    plan: &Arc<PropagationPlan<T>>,
    cfg: &UnfoldConfig,
) -> Result<(T, Vec<Vec<Tensor<T>>>)> {
    check_denoiser(cfg, weights.len())?;
    let mut tape = Tape::new();
    let params: Vec<_> = weights.iter().map(|w| graph::load_params(&mut tape, w, true)).collect();
    let loss = loss_on_tape(&mut tape, &params, x0, y, plan, T::lit(cfg.rho))?;
    let grads = tape.backward(loss)?;
    let per_stage = params
        .iter()
        .zip(weights)
        .map(|(p, w)| {
            p.named().iter().zip(w.params.named()).map(|((_, &v), (_, t))| grads.get_or_zeros(v, t)).collect()
        })
        .collect();
    Ok((tape.value(loss).data()[0].re, per_stage))
}

/// Adam over every real degree of freedom; a complex weight is two reals.
#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    lr: T,
    beta1: T,
    beta2: T,
    epsilon: T,
    t: i32,
    m: Vec<Vec<Tensor<T>>>,
    v: Vec<Vec<Tensor<T>>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: &TrainConfig, weights: &[PcdWeights<T>]) -> Self {
        let zeros = || -> Vec<Vec<Tensor<T>>> {
            weights
                .iter()
                .map(|w| w.params.named().iter().map(|(_, t)| Tensor::zeros(t.shape(), t.kind())).collect())
                .collect()
        };
        Self {
            lr: T::lit(cfg.learning_rate),
            beta1: T::lit(cfg.beta1),
            beta2: T::lit(cfg.beta2),
            epsilon: T::lit(cfg.epsilon),
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, weights: &mut [PcdWeights<T>], grads: &[Vec<Tensor<T>>]) {
        self.t += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.t);
        let c2 = one - self.beta2.powi(self.t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.epsilon, self.lr);
        let update = |p: T, g: T, m: &mut T, v: &mut T| -> T {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            p - lr * (*m / c1) / ((*v / c2).sqrt() + eps)
        };
        for (s, w) in weights.iter_mut().enumerate() {
            let mut i = 0;
            let (ms, vs, gs) = (&mut self.m[s], &mut self.v[s], &grads[s]);
            w.params = w.params.map(|_, t| {
                let mut out = t.clone();
                let (m, v, g) = (ms[i].data_mut(), vs[i].data_mut(), gs[i].data());
                for (j, p) in out.data_mut().iter_mut().enumerate() {
                    p.re = update(p.re, g[j].re, &mut m[j].re, &mut v[j].re);
                    if t.kind() == Kind::Complex {
                        p.im = update(p.im, g[j].im, &mut m[j].im, &mut v[j].im);
                    }
                }
                i += 1;
                out
            });
        }
    }
}

/// Fresh per-stage weights; stage `k` is seeded with `seed + k`.
pub fn init_stages<T: Real>(config: PcdConfig, stages: usize, seed: u64) -> Vec<PcdWeights<T>> {
    (0..stages).map(|k| PcdWeights::init(config, seed.wrapping_add(k as u64))).collect()
}

/// Quantized reconstruction of `hologram` and its scores against `target`.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub reconstruction: Gray8,
    pub psnr: f64,
    pub ssim: f64,
}

/// Quantizes the hologram to 8 bits, re-propagates, fits the global gain to
/// the target by least squares and scores the 8-bit result.
pub fn evaluate_hologram<T: Real>(hologram: &Hologram<T>, target: &Gray8, plan: &PropagationPlan<T>) -> Result<Evaluation> {
    let r = reconstruct(hologram, plan)?;
    let reconstruction = Gray8::from_fitted(&r, &target.to_amplitude())?;
    Ok(Evaluation { psnr: psnr(target, &reconstruction)?, ssim: ssim(target, &reconstruction)?, reconstruction })
}

/// Runs the unfolding from the same seeded start used during training.
pub fn infer<T: Real>(
    image: &Gray8,
    index: usize,
    weights: &[PcdWeights<T>],
    plan: &Arc<PropagationPlan<T>>,
    cfg: &UnfoldConfig,
    seed: u64,
) -> Result<Hologram<T>> {
    if cfg.denoiser == DenoiserKind::Pcd && weights.len() != cfg.stages {
        return Err(Error::StageMismatch { stages: cfg.stages, weights: weights.len() });
    }
    let y = solver_target::<T>(image);
    let x0 = init_field(&y, plan, sample_seed(seed, index))?;
    extract_phase(&hqs_unfold_from(x0, &y, plan, cfg, weights)?.x)
}

/// Mean PSNR and SSIM over `samples`.
pub fn validate_weights<T: Real>(
    samples: &[Sample],
    weights: &[PcdWeights<T>],
    plan: &Arc<PropagationPlan<T>>,
    cfg: &UnfoldConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (mut p, mut s) = (0.0, 0.0);
    for (i, sample) in samples.iter().enumerate() {
        let e = evaluate_hologram(&infer(&sample.image, i, weights, plan, cfg, seed)?, &sample.image, plan)?;
        p += e.psnr;
        s += e.ssim;
    }
    let n = samples.len() as f64;
    Ok((p / n, s / n))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
    pub wall_ms: u128,
}

impl LogRow {
    pub const HEADER: [&'static str; 6] = ["epoch", "step", "loss", "val_psnr", "val_ssim", "wall_ms"];
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Real> {
    pub weights: Vec<PcdWeights<T>>,
    pub log: Vec<LogRow>,
}

/// Trains per-stage weights with Adam. Each epoch visits the training samples
/// in an order drawn from the seed, averages gradients over each batch and
/// then scores the validation samples; `on_epoch` sees each log row as it is
/// produced.
pub fn train<T: Real>(
    train_set: &[Sample],
    validation: &[Sample],
    plan: &Arc<PropagationPlan<T>>,
    train_cfg: &TrainConfig,
    unfold_cfg: &UnfoldConfig,
    pcd_cfg: PcdConfig,
    mut on_epoch: impl FnMut(&LogRow),
) -> Result<TrainOutcome<T>> {
    train_cfg.validate()?;
    let weights = init_stages(pcd_cfg, unfold_cfg.stages, train_cfg.seed);
    train_from(weights, train_set, validation, plan, train_cfg, unfold_cfg, &mut on_epoch)
}

/// [`train`] starting from the given weights.
pub fn train_from<T: Real>(
    mut weights: Vec<PcdWeights<T>>,
    train_set: &[Sample],
    validation: &[Sample],
    plan: &Arc<PropagationPlan<T>>,
    train_cfg: &TrainConfig,
    unfold_cfg: &UnfoldConfig,
    on_epoch: &mut dyn FnMut(&LogRow),
) -> Result<TrainOutcome<T>> {
    train_cfg.validate()?;
    check_denoiser(unfold_cfg, weights.len())?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let targets: Vec<Amplitude<T>> = train_set.iter().map(|s| solver_target(&s.image)).collect();
    let starts = targets
        .iter()
        .enumerate()
        .map(|(i, y)| init_field(y, plan, sample_seed(train_cfg.seed, i)))
        .collect::<Result<Vec<_>>>()?;
    let mut adam = Adam::new(train_cfg, &weights);
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let start = Instant::now();
    let mut log = Vec::with_capacity(train_cfg.epochs);
    let mut step = 0;
    for epoch in 1..=train_cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(train_cfg.batch_size) {
            let mut acc: Option<Vec<Vec<Tensor<T>>>> = None;
            for &i in batch {
                let (loss, g) = loss_and_gradients(&weights, &targets[i], &starts[i], plan, unfold_cfg)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite("training loss"));
                }
                total += loss.as_f64();
                match acc.as_mut() {
                    None => acc = Some(g),
                    Some(a) => a.iter_mut().flatten().zip(g.iter().flatten()).for_each(|(a, g)| a.add_assign(g)),
                }
            }
            let mut grads = acc.expect("non-empty batch");
            let inv = T::one() / T::from_usize_lossy(batch.len());
            grads.iter_mut().flatten().for_each(|g| g.scale(inv));
            adam.step(&mut weights, &grads);
            step += 1;
        }
        let (val_psnr, val_ssim) = validate_weights(validation, &weights, plan, unfold_cfg, train_cfg.seed)?;
        let row = LogRow {
            epoch,
            step,
            loss: total / train_set.len() as f64,
            val_psnr,
            val_ssim,
            wall_ms: start.elapsed().as_millis(),
        };
        log::info!("epoch {epoch}: loss {:.6} val psnr {:.3} dB", row.loss, row.val_psnr);
        on_epoch(&row);
        log.push(row);
    }
    Ok(TrainOutcome { weights, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propagation::{build_plan, OpticalConfig};

    fn setup(n: usize) -> (Arc<PropagationPlan<f64>>, Gray8) {
        let cfg = OpticalConfig::new(520e-9, 8e-6, 0.002, n, n).unwrap();
        let img = Gray8::from_fn(n, n, |r, c| ((r * 5 + c * 3) % 200 + 30) as u8);
        (Arc::new(build_plan(&cfg).unwrap()), img)
    }

    fn small() -> PcdConfig {
        PcdConfig { channels: 4, blocks: 1, table_size: 15 }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = TrainConfig { learning_rate: 0.1, ..Default::default() };
        let mut w = init_stages::<f64>(small(), 1, 0);
        let before = w.clone();
        let grads: Vec<Vec<Tensor<f64>>> = vec![w[0]
            .params
            .named()
            .iter()
            .map(|(_, t)| {
                let mut g = (*t).clone();
                g.data_mut().iter_mut().for_each(|z| *z = num_complex::Complex::new(2.0, -3.0));
                if t.is_real() {
                    g.project_real();
                }
                g
            })
            .collect()];
        let mut adam = Adam::new(&cfg, &w);
        adam.step(&mut w, &grads);
        let (a, b) = (&before[0].params.fem1, &w[0].params.fem1);
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p.re - q.re - 0.1).abs() < 1e-6);
            assert!((p.im - q.im + 0.1).abs() < 1e-6);
        }
        let (a, b) = (&before[0].params.blocks[0].bias_table, &w[0].params.blocks[0].bias_table);
        assert!(b.is_real());
        assert!((a.data()[0].re - b.data()[0].re - 0.1).abs() < 1e-6);
    }

    #[test]
    fn identity_stages_match_plain_gradient_descent() {
        let (plan, img) = setup(32);
        let ucfg = UnfoldConfig { stages: 2, ..Default::default() };
        let w = init_stages::<f64>(small(), 2, 1);
        let y = solver_target::<f64>(&img);
        let x0 = init_field(&y, &plan, 5).unwrap();
        let mut x = x0.clone();
        for _ in 0..2 {
            x = crate::solvers::gradient_step(&x, &y, &plan, 1.0).unwrap();
        }
        let u = x.map(crate::autodiff::unit_phase).unwrap();
        let r = plan.propagate(&u).unwrap().amplitude();
        let expected: f64 =
            r.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (32.0 * 32.0);
        let got = training_loss(&w, &y, &x0, &plan, &ucfg).unwrap();
        assert!((got - expected).abs() < 1e-10 * expected.max(1.0), "{got} vs {expected}");
    }

    #[test]
    fn requires_pcd_and_matching_stages() {
        let (plan, img) = setup(32);
        let y = solver_target::<f64>(&img);
        let x0 = init_field(&y, &plan, 0).unwrap();
        let w = init_stages::<f64>(small(), 2, 0);
        let tv = UnfoldConfig { stages: 2, denoiser: DenoiserKind::ComplexTv, ..Default::default() };
        assert!(training_loss(&w, &y, &x0, &plan, &tv).is_err());
        let three = UnfoldConfig { stages: 3, ..Default::default() };
        assert!(matches!(training_loss(&w, &y, &x0, &plan, &three), Err(Error::StageMismatch { .. })));
    }
}
