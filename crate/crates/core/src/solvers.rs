//! Phase retrieval solvers: Gerchberg-Saxton, the amplitude-fidelity gradient
//! step, complex total-variation denoising and the half-quadratic-splitting
//! unfolding driver.
//!
//! The fidelity term is `F(x) = 1/2 ||y - |Phi x|||^2` and the update used by
//! every solver is
//!
//! ```text
//! v = x + rho * Phi^H [ (Phi x / |Phi x|) * (y - |Phi x|) ]
//! ```
//!
//! which is `x - rho * grad F` with the conjugate-cotangent gradient; the
//! unit-phase factor is `1` wherever `|Phi x| < 1e-12`.

use std::f64::consts::TAU;
use std::sync::Arc;

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{unit_phase, Tape, Var};
use crate::error::{Error, Result};
use crate::pcd::{graph, PcdWeights};
use crate::propagation::PropagationPlan;
use crate::scalar::Real;
use crate::tensor::{Amplitude, ComplexField, Kind, Tensor};

/// Phase-only hologram with entries in `[0, 2pi)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Hologram<T> {
    height: usize,
    width: usize,
    pitch: T,
    phase: Vec<T>,
}

/// Number of levels of an 8-bit phase SLM.
pub const PHASE_LEVELS: u32 = 256;

impl<T: Real> Hologram<T> {
    /// Wraps arbitrary phases into `[0, 2pi)`.
    pub fn new(height: usize, width: usize, pitch: T, phase: Vec<T>) -> Result<Self> {
        if phase.len() != height * width || height == 0 || width == 0 {
            return Err(Error::ShapeMismatch(format!("{} phases for a {height}x{width} hologram", phase.len())));
        }
        if phase.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("hologram phase"));
        }
        Ok(Self { height, width, pitch, phase: phase.into_iter().map(wrap_phase).collect() })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pitch(&self) -> T {
        self.pitch
    }

    pub fn phase(&self) -> &[T] {
        &self.phase
    }

    /// The unit-amplitude SLM field `exp(i phase)`.
    pub fn field(&self) -> ComplexField<T> {
        let data = self.phase.iter().map(|&p| Complex::from_polar(T::one(), p)).collect();
        ComplexField::new(self.height, self.width, self.pitch, data).expect("finite phases")
    }

    /// 8-bit codes `round(phase * 255 / 2pi)`.
    pub fn to_u8(&self) -> Vec<u8> {
        let k = T::lit(255.0) / T::TAU();
        self.phase.iter().map(|&p| (p * k).round().to_f64().unwrap_or(0.0).clamp(0.0, 255.0) as u8).collect()
    }

    /// Phases reconstructed from 8-bit codes (`code * 2pi / 255`, wrapped).
    pub fn from_u8(height: usize, width: usize, pitch: T, codes: &[u8]) -> Result<Self> {
        let k = T::TAU() / T::lit(255.0);
        Self::new(height, width, pitch, codes.iter().map(|&c| T::lit(f64::from(c)) * k).collect())
    }

    /// This hologram after a round trip through 8-bit codes.
    pub fn quantized(&self) -> Self {
        Self::from_u8(self.height, self.width, self.pitch, &self.to_u8()).expect("same dimensions")
    }
}

/// Reconstructed amplitude `|Phi exp(i phase_q)|` of the 8-bit quantized
/// hologram, as an SLM would display it.
pub fn reconstruct<T: Real>(hologram: &Hologram<T>, plan: &PropagationPlan<T>) -> Result<Amplitude<T>> {
    check_dims("hologram", hologram.dims(), plan)?;
    Ok(plan.propagate(&hologram.quantized().field())?.amplitude())
}

fn wrap_phase<T: Real>(p: T) -> T {
    let tau = T::TAU();
    let w = p - (p / tau).floor() * tau;
    if w >= tau || w < T::zero() {
        T::zero()
    } else {
        w
    }
}

/// `arg(x)` in `[0, 2pi)`; zero-magnitude entries map to phase 0. Fails on
/// non-finite entries.
pub fn extract_phase<T: Real>(x: &ComplexField<T>) -> Result<Hologram<T>> {
    let phase = x
        .data()
        .iter()
        .map(|z| if z.re == T::zero() && z.im == T::zero() { T::zero() } else { z.im.atan2(z.re) })
        .collect();
    let (h, w) = x.dims();
    Hologram::new(h, w, x.pitch(), phase)
}

fn check_dims<T: Real>(what: &str, dims: (usize, usize), plan: &PropagationPlan<T>) -> Result<()> {
    if dims != plan.dims() {
        return Err(Error::ShapeMismatch(format!(
            "{what} is {}x{} but the propagation plan is {}x{}",
            dims.0,
            dims.1,
            plan.dims().0,
            plan.dims().1
        )));
    }
    Ok(())
}

/// `x0 = Phi^H (y * exp(i theta))` with `theta` i.i.d. uniform on `[0, 2pi)`.
pub fn init_field<T: Real>(y: &Amplitude<T>, plan: &PropagationPlan<T>, seed: u64) -> Result<ComplexField<T>> {
    if !y.is_nonnegative() {
        return Err(Error::InvalidArgument("target amplitude has negative entries".into()));
    }
    check_dims("target", y.dims(), plan)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data: Vec<Complex<T>> = y
        .data()
        .iter()
        .map(|&a| Complex::from_polar(a, T::lit(rng.random_range(0.0..TAU))))
        .collect();
    plan.adjoint_in_place(&mut data);
    let (h, w) = y.dims();
    ComplexField::new(h, w, T::lit(plan.config().pitch), data)
}

/// `F(x) = 1/2 ||y - |Phi x|||^2`.
pub fn objective<T: Real>(x: &ComplexField<T>, y: &Amplitude<T>, plan: &PropagationPlan<T>) -> Result<T> {
    let p = plan.propagate(x)?;
    check_dims("target", y.dims(), plan)?;
    Ok(T::lit(0.5) * p.data().iter().zip(y.data()).map(|(z, &a)| (a - z.norm()).powi(2)).sum::<T>())
}

/// One descent step on `F`.
pub fn gradient_step<T: Real>(x: &ComplexField<T>, y: &Amplitude<T>, plan: &PropagationPlan<T>, rho: T) -> Result<ComplexField<T>> {
    check_dims("target", y.dims(), plan)?;
    let mut r = plan.propagate(x)?.into_data();
    for (z, &a) in r.iter_mut().zip(y.data()) {
        *z = unit_phase(*z) * (a - z.norm());
    }
    plan.adjoint_in_place(&mut r);
    let data = x.data().iter().zip(&r).map(|(x, g)| x + g * rho).collect();
    let (h, w) = x.dims();
    ComplexField::new(h, w, x.pitch(), data)
}

/// Records [`gradient_step`] on a tape. `x` is `[1, H, W]` and `y` a real
/// constant of the same shape.
pub fn gradient_step_on_tape<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    y: Var,
    plan: &Arc<PropagationPlan<T>>,
    rho: T,
) -> Result<Var> {
    let p = tape.propagate(x, plan)?;
    let a = tape.abs(p);
    let r = tape.sub(y, a)?;
    let u = tape.unit_phase(p);
    let m = tape.mul(u, r)?;
    let b = tape.adjoint_propagate(m, plan)?;
    let s = tape.scale_const(b, rho);
    Ok(tape.add(x, s)?)
}

/// Output of [`gs_solve`].
#[derive(Clone, Debug)]
pub struct GsOutput<T: Real> {
    pub hologram: Hologram<T>,
    /// Image-plane field of the final phase-only hologram.
    pub image_field: ComplexField<T>,
    /// `||y - |Phi x_k|||` for the phase-only iterate after each iteration.
    pub errors: Vec<T>,
}

/// Gerchberg-Saxton alternating projections from [`init_field`].
pub fn gs_solve<T: Real>(y: &Amplitude<T>, plan: &PropagationPlan<T>, iters: usize, seed: u64) -> Result<GsOutput<T>> {
    if iters == 0 {
        return Err(Error::InvalidArgument("Gerchberg-Saxton needs at least one iteration".into()));
    }
    let mut x = init_field(y, plan, seed)?.into_data();
    let mut errors = Vec::with_capacity(iters);
    let mut image = Vec::new();
    for _ in 0..iters {
        let mut p = x.clone();
        plan.forward_in_place(&mut p);
        for (z, &a) in p.iter_mut().zip(y.data()) {
            *z = unit_phase(*z) * a;
        }
        plan.adjoint_in_place(&mut p);
        for z in p.iter_mut() {
            *z = unit_phase(*z);
        }
        x = p;
        image = x.clone();
        plan.forward_in_place(&mut image);
        let err = image.iter().zip(y.data()).map(|(z, &a)| (a - z.norm()).powi(2)).sum::<T>().sqrt();
        errors.push(err);
    }
    let (h, w) = y.dims();
    let pitch = T::lit(plan.config().pitch);
    let slm = ComplexField::new(h, w, pitch, x)?;
    Ok(GsOutput { hologram: extract_phase(&slm)?, image_field: ComplexField::new(h, w, pitch, image)?, errors })
}

/// Output of [`tv_denoise_complex`].
#[derive(Clone, Debug)]
pub struct TvOutput<T: Real> {
    pub field: ComplexField<T>,
    /// Dual objective `1/2 ||div p - v / weight||^2` after each iteration.
    pub dual_objective: Vec<T>,
}

/// Dual step size; `1/8` bounds the squared norm of the discrete gradient.
const TV_STEP: f64 = 0.125;

/// Approximately solves `argmin_x 1/2 ||x - v||^2 + weight * TV(x)` with
/// isotropic TV coupling the real and imaginary channels, by projected
/// gradient on the dual.
pub fn tv_denoise_complex<T: Real>(v: &ComplexField<T>, weight: T, iters: usize) -> Result<TvOutput<T>> {
    if !(weight >= T::zero()) || !weight.is_finite() {
        return Err(Error::InvalidArgument(format!("TV weight must be non-negative, got {weight}")));
    }
    if weight == T::zero() {
        return Ok(TvOutput { field: v.clone(), dual_objective: Vec::new() });
    }
    let (h, w) = v.dims();
    let n = h * w;
    let zero = Complex::new(T::zero(), T::zero());
    let target: Vec<_> = v.data().iter().map(|z| z / weight).collect();
    let (mut px, mut py) = (vec![zero; n], vec![zero; n]);
    let mut div = vec![zero; n];
    let mut trace = Vec::with_capacity(iters);
    let tau = T::lit(TV_STEP);
    divergence(&px, &py, h, w, &mut div);
    for _ in 0..iters {
        let r: Vec<_> = div.iter().zip(&target).map(|(d, t)| d - t).collect();
        for row in 0..h {
            for col in 0..w {
                let i = row * w + col;
                let gx = if col + 1 < w { r[i + 1] - r[i] } else { zero };
                let gy = if row + 1 < h { r[i + w] - r[i] } else { zero };
                let (nx, ny) = (px[i] + gx * tau, py[i] + gy * tau);
                let norm = (nx.norm_sqr() + ny.norm_sqr()).sqrt().max(T::one());
                px[i] = nx / norm;
                py[i] = ny / norm;
            }
        }
        divergence(&px, &py, h, w, &mut div);
        let obj = div.iter().zip(&target).map(|(d, t)| (d - t).norm_sqr()).sum::<T>() * T::lit(0.5);
        trace.push(obj);
    }
    let data = v.data().iter().zip(&div).map(|(z, d)| z - d * weight).collect();
    Ok(TvOutput { field: ComplexField::new(h, w, v.pitch(), data)?, dual_objective: trace })
}

/// Negative adjoint of the forward-difference gradient.
fn divergence<T: Real>(px: &[Complex<T>], py: &[Complex<T>], h: usize, w: usize, out: &mut [Complex<T>]) {
    for row in 0..h {
        for col in 0..w {
            let i = row * w + col;
            let mut d = Complex::new(T::zero(), T::zero());
            if col + 1 < w {
                d += px[i];
            }
            if col > 0 {
                d -= px[i - 1];
            }
            if row + 1 < h {
                d += py[i];
            }
            if row > 0 {
                d -= py[i - w];
            }
            out[i] = d;
        }
    }
}

/// Isotropic complex total variation `sum sqrt(|dx|^2 + |dy|^2)`.
pub fn total_variation<T: Real>(x: &ComplexField<T>) -> T {
    let (h, w) = x.dims();
    let d = x.data();
    let mut tv = T::zero();
    for row in 0..h {
        for col in 0..w {
            let i = row * w + col;
            let dx = if col + 1 < w { (d[i + 1] - d[i]).norm_sqr() } else { T::zero() };
            let dy = if row + 1 < h { (d[i + w] - d[i]).norm_sqr() } else { T::zero() };
            tv += (dx + dy).sqrt();
        }
    }
    tv
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DenoiserKind {
    /// Pure gradient descent.
    None,
    ComplexTv,
    Pcd,
}

impl std::str::FromStr for DenoiserKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "tv" | "complex-tv" | "complex_tv" => Ok(Self::ComplexTv),
            "pcd" => Ok(Self::Pcd),
            other => Err(Error::Config(format!("unknown denoiser `{other}` (expected none, tv or pcd)"))),
        }
    }
}

impl std::fmt::Display for DenoiserKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::ComplexTv => "tv",
            Self::Pcd => "pcd",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnfoldConfig {
    pub stages: usize,
    pub rho: f64,
    pub tv_weight: f64,
    pub tv_iters: usize,
    pub denoiser: DenoiserKind,
}

impl Default for UnfoldConfig {
    fn default() -> Self {
        Self { stages: 3, rho: 1.0, tv_weight: 0.05, tv_iters: 50, denoiser: DenoiserKind::Pcd }
    }
}

pub const MAX_STAGES: usize = 8;

impl UnfoldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.stages > MAX_STAGES {
            return Err(Error::Config(format!("stage count must be in 1..={MAX_STAGES}, got {}", self.stages)));
        }
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return Err(Error::Config(format!("step size must be positive, got {}", self.rho)));
        }
        if self.denoiser == DenoiserKind::ComplexTv && (!(self.tv_weight >= 0.0) || self.tv_iters == 0) {
            return Err(Error::Config("TV denoising needs a non-negative weight and at least one iteration".into()));
        }
        Ok(())
    }
}

/// Iterates of one unfolding run.
#[derive(Clone, Debug)]
pub struct UnfoldState<T: Real> {
    /// `x^(k)`: the current estimate.
    pub x: ComplexField<T>,
    /// `v^(k)`: the last post-gradient iterate.
    pub v: ComplexField<T>,
    /// Number of completed stages.
    pub k: usize,
}

#[derive(Clone, Debug)]
pub struct UnfoldOutput<T: Real> {
    pub hologram: Hologram<T>,
    /// Final estimate `x^(N_s)` on the SLM plane.
    pub field: ComplexField<T>,
}

fn field_tensor<T: Real>(x: &ComplexField<T>) -> Tensor<T> {
    let (h, w) = x.dims();
    Tensor::new(&[1, h, w], x.data().to_vec(), Kind::Complex).expect("field shape")
}

fn amplitude_tensor<T: Real>(y: &Amplitude<T>) -> Tensor<T> {
    let (h, w) = y.dims();
    Tensor::from_real(&[1, h, w], y.data()).expect("amplitude shape")
}

/// Records `N_s` stages of gradient step plus denoiser starting from `x0`.
/// Stage `k` uses `stage_params[k]`.
pub fn unfold_on_tape<T: Real>(
    tape: &mut Tape<T>,
    x0: Var,
    y: &Amplitude<T>,
    plan: &Arc<PropagationPlan<T>>,
    rho: T,
    stage_params: &[crate::pcd::PcdParams<Var>],
) -> Result<Var> {
    let yv = tape.constant(amplitude_tensor(y));
    let mut x = x0;
    for p in stage_params {
        let v = gradient_step_on_tape(tape, x, yv, plan, rho)?;
        x = graph::pcd(tape, v, p)?;
    }
    Ok(x)
}

/// The unfolded solver: `x^(0) = init_field`, then per stage
/// `v = gradient_step(x)`, `x = denoise(v)`.
pub fn hqs_unfold<T: Real>(
    y: &Amplitude<T>,
    plan: &Arc<PropagationPlan<T>>,
    cfg: &UnfoldConfig,
    weights: &[PcdWeights<T>],
    seed: u64,
) -> Result<UnfoldOutput<T>> {
    cfg.validate()?;
    if cfg.denoiser == DenoiserKind::Pcd && weights.len() != cfg.stages {
        return Err(Error::StageMismatch { stages: cfg.stages, weights: weights.len() });
    }
    if cfg.denoiser == DenoiserKind::Pcd {
        let (h, w) = y.dims();
        graph::check_divisible(h, w)?;
    }
    let x0 = init_field(y, plan, seed)?;
    let state = hqs_unfold_from(x0, y, plan, cfg, weights)?;
    Ok(UnfoldOutput { hologram: extract_phase(&state.x)?, field: state.x })
}

/// Runs the unfolding stages from a given starting point.
pub fn hqs_unfold_from<T: Real>(
    x0: ComplexField<T>,
    y: &Amplitude<T>,
    plan: &Arc<PropagationPlan<T>>,
    cfg: &UnfoldConfig,
    weights: &[PcdWeights<T>],
) -> Result<UnfoldState<T>> {
    cfg.validate()?;
    let rho = T::lit(cfg.rho);
    match cfg.denoiser {
        DenoiserKind::None | DenoiserKind::ComplexTv => {
            let mut state = UnfoldState { v: x0.clone(), x: x0, k: 0 };
            for _ in 0..cfg.stages {
                state.v = gradient_step(&state.x, y, plan, rho)?;
                state.x = match cfg.denoiser {
                    DenoiserKind::ComplexTv => tv_denoise_complex(&state.v, T::lit(cfg.tv_weight), cfg.tv_iters)?.field,
                    _ => state.v.clone(),
                };
                state.k += 1;
            }
            Ok(state)
        }
        DenoiserKind::Pcd => {
            if weights.len() != cfg.stages {
                return Err(Error::StageMismatch { stages: cfg.stages, weights: weights.len() });
            }
            let mut state = UnfoldState { v: x0.clone(), x: x0, k: 0 };
            for w in weights {
                let mut tape = Tape::new();
                let xv = tape.constant(field_tensor(&state.x));
                let yv = tape.constant(amplitude_tensor(y));
                let v = gradient_step_on_tape(&mut tape, xv, yv, plan, rho)?;
                let p = graph::load_params(&mut tape, w, false);
                let x = graph::pcd(&mut tape, v, &p)?;
                let (h, wd) = state.x.dims();
                let pitch = state.x.pitch();
                state.v = ComplexField::new(h, wd, pitch, tape.value(v).data().to_vec())?;
                state.x = ComplexField::new(h, wd, pitch, tape.value(x).data().to_vec())?;
                state.k += 1;
            }
            Ok(state)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propagation::{OpticalConfig, Regime};

    fn plan(n: usize) -> PropagationPlan<f64> {
        let cfg = OpticalConfig { width: n, height: n, distance: 0.002, ..OpticalConfig::default() };
        PropagationPlan::with_regime(&cfg, Regime::Asm).unwrap()
    }

    #[test]
    fn extract_phase_conventions() {
        let f = |z: Complex<f64>| extract_phase(&ComplexField::new(1, 1, 8e-6, vec![z]).unwrap()).unwrap().phase()[0];
        assert!((f(Complex::new(0.0, 1.0)) - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert!((f(Complex::new(-1.0, 0.0)) - std::f64::consts::PI).abs() < 1e-15);
        assert_eq!(f(Complex::new(0.0, 0.0)), 0.0);
        assert!(f(Complex::new(1.0, -1e-300)) < std::f64::consts::TAU);
    }

    #[test]
    fn wrap_stays_in_range() {
        for p in [-1e-18, -7.0, 0.0, 6.283185307179586, 100.0, -0.0] {
            let w = wrap_phase(p);
            assert!((0.0..std::f64::consts::TAU).contains(&w), "{p} -> {w}");
        }
    }

    #[test]
    fn quantization_codes() {
        let h = Hologram::new(1, 3, 8e-6, vec![0.0, std::f64::consts::FRAC_PI_2, 6.28]).unwrap();
        assert_eq!(h.to_u8(), vec![0, 64, 255]);
    }

    #[test]
    fn scalar_gradient_step_hand_value() {
        // Phi = identity (z = 0), x = 2, y = 3 -> v = 3 at rho = 1.
        let cfg = OpticalConfig { width: 2, height: 2, distance: 0.0, ..OpticalConfig::default() };
        let p = PropagationPlan::<f64>::with_regime(&cfg, Regime::Asm).unwrap();
        let x = ComplexField::new(2, 2, 8e-6, vec![Complex::new(2.0, 0.0); 4]).unwrap();
        let y = Amplitude::new(2, 2, vec![3.0; 4]).unwrap();
        let v = gradient_step(&x, &y, &p, 1.0).unwrap();
        for z in v.data() {
            assert!((z - Complex::new(3.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn zero_residual_is_fixed_point() {
        let p = plan(8);
        let x = ComplexField::from_fn(8, 8, 8e-6, |r, c| Complex::new(r as f64 - 3.0, c as f64 * 0.5)).unwrap();
        let y = p.propagate(&x).unwrap().amplitude();
        let v = gradient_step(&x, &y, &p, 1.0).unwrap();
        assert!(v.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn zero_target_gives_zero_init() {
        let p = plan(8);
        let y = Amplitude::new(8, 8, vec![0.0; 64]).unwrap();
        assert!(init_field(&y, &p, 5).unwrap().data().iter().all(|z| z.norm() == 0.0));
        let neg = Amplitude::new(8, 8, vec![-1.0; 64]);
        assert!(neg.is_err() || init_field(&neg.unwrap(), &p, 5).is_err());
    }

    #[test]
    fn tv_piecewise_constant_is_preserved() {
        let v = ComplexField::from_fn(8, 8, 8e-6, |r, _| if r < 4 { Complex::new(1.0, 0.5) } else { Complex::new(-0.5, 2.0) }).unwrap();
        // The jump is large relative to the weight, so only a tiny shrink occurs.
        let out = tv_denoise_complex(&v, 1e-8, 200).unwrap();
        assert!(out.field.max_abs_diff(&v) < 1e-6);
        let flat = ComplexField::from_fn(8, 8, 8e-6, |_, _| Complex::new(0.3, -0.1)).unwrap();
        let out = tv_denoise_complex(&flat, 0.5, 20).unwrap();
        assert!(out.field.max_abs_diff(&flat) < 1e-12);
    }

    #[test]
    fn stage_mismatch_rejected() {
        let p = Arc::new(plan(32));
        let y = Amplitude::new(32, 32, vec![1.0; 1024]).unwrap();
        let cfg = UnfoldConfig { stages: 2, ..UnfoldConfig::default() };
        let w = vec![PcdWeights::<f64>::init(crate::pcd::PcdConfig { channels: 2, blocks: 1, table_size: 3 }, 0)];
        assert!(matches!(hqs_unfold(&y, &p, &cfg, &w, 0), Err(Error::StageMismatch { stages: 2, weights: 1 })));
    }
}
