//! Free-space scalar diffraction between the SLM plane and the image plane.
//!
//! Three regimes are dispatched by distance:
//!
//! * `z <= z1`: angular-spectrum transfer function `H(fx, fy, z)`;
//! * `z1 < z <= z2`: FFT of the sampled Rayleigh-Sommerfeld impulse response;
//! * `z > z2`: the same impulse response with a local-frequency Nyquist window.
//!
//! Every kernel is a frequency-domain multiplier in natural FFT order, so
//! propagation is `ifft2(kernel * fft2(u))` with unitary transforms and the
//! adjoint is the same with the conjugate kernel. Kernels are evaluated in
//! double precision regardless of `T`; the phases involved reach 1e5 radians.
//!
//! Impulse responses are sampled on the grid with sample `(H/2, W/2)` on the
//! optical axis and moved to the origin with [`ifftshift`] before transforming.

use std::f64::consts::PI;
use std::fmt;

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{ifftshift, ComplexField, Fft2};

/// Physical parameters of one SLM-to-image-plane configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OpticalConfig {
    /// Wavelength in meters.
    pub wavelength: f64,
    /// SLM (and image plane) pixel pitch in meters.
    pub pitch: f64,
    /// Propagation distance in meters.
    pub distance: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for OpticalConfig {
    fn default() -> Self {
        Self { wavelength: 520e-9, pitch: 8e-6, distance: 0.20, width: 1920, height: 1080 }
    }
}

impl OpticalConfig {
    pub fn new(wavelength: f64, pitch: f64, distance: f64, width: usize, height: usize) -> Result<Self> {
        let cfg = Self { wavelength, pitch, distance, width, height };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.wavelength > 0.0) || !self.wavelength.is_finite() {
            return Err(Error::Config(format!("wavelength must be positive, got {}", self.wavelength)));
        }
        if !(self.pitch > self.wavelength / 2.0) || !self.pitch.is_finite() {
            return Err(Error::Config(format!(
                "pixel pitch {} m must exceed half the wavelength ({} m)",
                self.pitch,
                self.wavelength / 2.0
            )));
        }
        if !(self.distance >= 0.0) || !self.distance.is_finite() {
            return Err(Error::Config(format!("distance must be non-negative, got {}", self.distance)));
        }
        if self.width < 2 || self.height < 2 {
            return Err(Error::Config(format!(
                "grid must be at least 2x2, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Grid extent used by the thresholds: `max(width, height)`.
    pub fn grid_extent(&self) -> usize {
        self.width.max(self.height)
    }

    pub fn with_distance(mut self, distance: f64) -> Self {
        self.distance = distance;
        self
    }

    pub fn with_size(mut self, height: usize, width: usize) -> Self {
        self.height = height;
        self.width = width;
        self
    }
}

/// `z1 = N dx sqrt(dx^2 - (lambda/2)^2) / lambda`, the largest distance at which
/// the angular-spectrum transfer function is adequately sampled.
pub fn asm_threshold_for(extent: usize, pitch: f64, wavelength: f64) -> Result<f64> {
    let radicand = pitch * pitch - (wavelength / 2.0).powi(2);
    if !(radicand > 0.0) || !(wavelength > 0.0) {
        return Err(Error::Config(format!(
            "ASM threshold undefined: pitch {pitch} m does not exceed half the wavelength {wavelength} m"
        )));
    }
    Ok(extent as f64 * pitch * radicand.sqrt() / wavelength)
}

/// `z2 = (25 N^4 dx^4 / lambda)^(1/3)`, the onset of the far-field regime.
pub fn far_threshold_for(extent: usize, pitch: f64, wavelength: f64) -> Result<f64> {
    if !(wavelength > 0.0) {
        return Err(Error::Config(format!("wavelength must be positive, got {wavelength}")));
    }
    let n_dx = extent as f64 * pitch;
    Ok((25.0 * n_dx.powi(4) / wavelength).cbrt())
}

pub fn asm_threshold(config: &OpticalConfig) -> Result<f64> {
    asm_threshold_for(config.grid_extent(), config.pitch, config.wavelength)
}

pub fn far_threshold(config: &OpticalConfig) -> Result<f64> {
    far_threshold_for(config.grid_extent(), config.pitch, config.wavelength)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Regime {
    /// Angular-spectrum transfer function.
    Asm,
    /// Sampled impulse response.
    IrMid,
    /// Sampled impulse response with the Nyquist window.
    IrFar,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Asm => "ASM",
            Regime::IrMid => "IR_MID",
            Regime::IrFar => "IR_FAR",
        })
    }
}

/// Regime for a distance given both thresholds; ties go to the nearer regime.
pub fn select_regime(distance: f64, z1: f64, z2: f64) -> Regime {
    if distance <= z1 {
        Regime::Asm
    } else if distance <= z2 {
        Regime::IrMid
    } else {
        Regime::IrFar
    }
}

/// Spatial frequencies of FFT bin `k` on an `n`-point axis with sample spacing `pitch`.
fn frequency(k: usize, n: usize, pitch: f64) -> f64 {
    let signed = if k < n.div_ceil(2) { k as f64 } else { k as f64 - n as f64 };
    signed / (n as f64 * pitch)
}

/// Angular-spectrum transfer function at signed distance `z`, FFT order.
/// Evanescent components are zeroed.
pub fn asm_kernel(config: &OpticalConfig, z: f64) -> Vec<Complex<f64>> {
    let (h, w) = (config.height, config.width);
    let inv_l2 = 1.0 / (config.wavelength * config.wavelength);
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        let fy = frequency(r, h, config.pitch);
        for c in 0..w {
            let fx = frequency(c, w, config.pitch);
            let arg = inv_l2 - fx * fx - fy * fy;
            if arg >= 0.0 {
                out.push(Complex::from_polar(1.0, 2.0 * PI * z * arg.sqrt()));
            } else {
                out.push(Complex::new(0.0, 0.0));
            }
        }
    }
    out
}

/// Rayleigh-Sommerfeld impulse response `z / (i lambda r^2) exp(i 2 pi r / lambda)`.
pub fn impulse_response(x: f64, y: f64, z: f64, wavelength: f64) -> Complex<f64> {
    let r2 = x * x + y * y + z * z;
    let r = r2.sqrt();
    let amp = z / (wavelength * r2);
    // 1/i = -i
    Complex::from_polar(amp, 2.0 * PI * r / wavelength) * Complex::new(0.0, -1.0)
}

/// Whether the local spatial frequency of the impulse response at `(x, y)`
/// stays within the grid Nyquist limit on both axes.
pub fn within_nyquist(x: f64, y: f64, z: f64, config: &OpticalConfig) -> bool {
    let r = (x * x + y * y + z * z).sqrt();
    let nyquist = 1.0 / (2.0 * config.pitch);
    let lr = config.wavelength * r;
    x.abs() / lr <= nyquist && y.abs() / lr <= nyquist
}

/// The impulse response sampled on the centered grid, row-major with the axis
/// at `(H/2, W/2)`. With `windowed`, samples outside the Nyquist window are zero.
pub fn sampled_impulse_response(config: &OpticalConfig, z: f64, windowed: bool) -> Vec<Complex<f64>> {
    let (h, w) = (config.height, config.width);
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        let y = (r as f64 - (h / 2) as f64) * config.pitch;
        for c in 0..w {
            let x = (c as f64 - (w / 2) as f64) * config.pitch;
            if windowed && !within_nyquist(x, y, z, config) {
                out.push(Complex::new(0.0, 0.0));
            } else {
                out.push(impulse_response(x, y, z, config.wavelength));
            }
        }
    }
    out
}

fn ir_kernel(config: &OpticalConfig, windowed: bool) -> Result<Vec<Complex<f64>>> {
    let z = config.distance;
    if !(z > 0.0) {
        return Err(Error::Config("impulse-response propagation needs a positive distance".into()));
    }
    let (h, w) = (config.height, config.width);
    let samples = sampled_impulse_response(config, z, windowed);
    let mut centered = ifftshift(&samples, h, w);
    Fft2::<f64>::new(h, w).forward(&mut centered);
    // Unitary FFT -> plain DFT, times the sample area for the convolution sum.
    let scale = ((h * w) as f64).sqrt() * config.pitch * config.pitch;
    Ok(centered.into_iter().map(|k| k * scale).collect())
}

/// Frequency-domain kernel of the sampled impulse response.
pub fn ir_mid_kernel(config: &OpticalConfig) -> Result<Vec<Complex<f64>>> {
    ir_kernel(config, false)
}

/// Frequency-domain kernel of the Nyquist-windowed impulse response.
pub fn ir_far_kernel(config: &OpticalConfig) -> Result<Vec<Complex<f64>>> {
    ir_kernel(config, true)
}

/// A precomputed propagation operator for one configuration.
#[derive(Clone, Debug)]
pub struct PropagationPlan<T: Real> {
    config: OpticalConfig,
    regime: Regime,
    z1: f64,
    z2: f64,
    kernel: Vec<Complex<T>>,
    fft: Fft2<T>,
}

/// Builds the plan for `config`, choosing the regime from the thresholds.
pub fn build_plan<T: Real>(config: &OpticalConfig) -> Result<PropagationPlan<T>> {
    config.validate()?;
    let z1 = asm_threshold(config)?;
    let z2 = far_threshold(config)?;
    PropagationPlan::with_regime(config, select_regime(config.distance, z1, z2))
}

impl<T: Real> PropagationPlan<T> {
    /// Builds a plan with an explicitly chosen regime, bypassing the dispatch.
    pub fn with_regime(config: &OpticalConfig, regime: Regime) -> Result<Self> {
        config.validate()?;
        let z1 = asm_threshold(config)?;
        let z2 = far_threshold(config)?;
        let kernel = match regime {
            Regime::Asm => asm_kernel(config, config.distance),
            Regime::IrMid => ir_mid_kernel(config)?,
            Regime::IrFar => ir_far_kernel(config)?,
        };
        Ok(Self {
            config: *config,
            regime,
            z1,
            z2,
            kernel: kernel.into_iter().map(|k| Complex::new(T::lit(k.re), T::lit(k.im))).collect(),
            fft: Fft2::new(config.height, config.width),
        })
    }

    pub fn config(&self) -> &OpticalConfig {
        &self.config
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn asm_threshold(&self) -> f64 {
        self.z1
    }

    pub fn far_threshold(&self) -> f64 {
        self.z2
    }

    pub fn kernel(&self) -> &[Complex<T>] {
        &self.kernel
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.config.height, self.config.width)
    }

    /// The plan for the conjugate-transpose operator (for ASM, propagation by `-z`).
    pub fn conjugated(&self) -> Self {
        Self {
            kernel: self.kernel.iter().map(|k| k.conj()).collect(),
            config: self.config.with_distance(-self.config.distance),
            ..self.clone()
        }
    }

    fn check(&self, field: &ComplexField<T>) -> Result<()> {
        if field.dims() != self.dims() {
            return Err(Error::ShapeMismatch(format!(
                "field {:?} does not match propagation plan {:?}",
                field.dims(),
                self.dims()
            )));
        }
        Ok(())
    }

    /// In-place `ifft2(kernel * fft2(data))`.
    pub fn forward_in_place(&self, data: &mut [Complex<T>]) {
        self.fft.forward(data);
        for (z, k) in data.iter_mut().zip(&self.kernel) {
            *z = *z * k;
        }
        self.fft.inverse(data);
    }

    /// In-place `ifft2(conj(kernel) * fft2(data))`.
    pub fn adjoint_in_place(&self, data: &mut [Complex<T>]) {
        self.fft.forward(data);
        for (z, k) in data.iter_mut().zip(&self.kernel) {
            *z = *z * k.conj();
        }
        self.fft.inverse(data);
    }

    /// Propagates a field to the image plane. The pitch is preserved.
    pub fn propagate(&self, field: &ComplexField<T>) -> Result<ComplexField<T>> {
        self.check(field)?;
        let mut data = field.data().to_vec();
        self.forward_in_place(&mut data);
        Ok(ComplexField::from_parts(field.height(), field.width(), field.pitch(), data))
    }

    /// Applies the conjugate-transpose of [`propagate`](Self::propagate).
    pub fn adjoint_propagate(&self, field: &ComplexField<T>) -> Result<ComplexField<T>> {
        self.check(field)?;
        let mut data = field.data().to_vec();
        self.adjoint_in_place(&mut data);
        Ok(ComplexField::from_parts(field.height(), field.width(), field.pitch(), data))
    }
}

pub fn propagate<T: Real>(field: &ComplexField<T>, plan: &PropagationPlan<T>) -> Result<ComplexField<T>> {
    plan.propagate(field)
}

pub fn adjoint_propagate<T: Real>(field: &ComplexField<T>, plan: &PropagationPlan<T>) -> Result<ComplexField<T>> {
    plan.adjoint_propagate(field)
}
