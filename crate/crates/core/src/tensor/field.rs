use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// A sampled 2-D complex wavefield with a physical pixel pitch.
///
/// Storage is row-major, `height` rows of `width` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexField<T> {
    height: usize,
    width: usize,
    pitch: T,
    data: Vec<Complex<T>>,
}

impl<T: Real> ComplexField<T> {
    pub fn new(height: usize, width: usize, pitch: T, data: Vec<Complex<T>>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimensions(format!("field must be at least 1x1, got {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} samples for a {height}x{width} field",
                data.len()
            )));
        }
        if !(pitch > T::zero()) || !pitch.is_finite() {
            return Err(Error::InvalidArgument(format!("pixel pitch must be positive, got {pitch}")));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite("complex field"));
        }
        Ok(Self { height, width, pitch, data })
    }

    pub fn zeros(height: usize, width: usize, pitch: T) -> Result<Self> {
        Self::new(height, width, pitch, vec![Complex::new(T::zero(), T::zero()); height * width])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        pitch: T,
        mut f: impl FnMut(usize, usize) -> Complex<T>,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self::new(height, width, pitch, data)
    }

    /// Unit-amplitude field `exp(i*phase)`.
    pub fn from_phase(phase: &[T], height: usize, width: usize, pitch: T) -> Result<Self> {
        if phase.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} phase values for a {height}x{width} field",
                phase.len()
            )));
        }
        Self::new(height, width, pitch, phase.iter().map(|&p| Complex::from_polar(T::one(), p)).collect())
    }

    /// Amplitude-only field (zero imaginary part).
    pub fn from_amplitude(amplitude: &Amplitude<T>, pitch: T) -> Result<Self> {
        Self::new(
            amplitude.height(),
            amplitude.width(),
            pitch,
            amplitude.data().iter().map(|&a| Complex::new(a, T::zero())).collect(),
        )
    }

    /// Wraps already-validated storage; used on hot paths that preserve finiteness.
    pub(crate) fn from_parts(height: usize, width: usize, pitch: T, data: Vec<Complex<T>>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self { height, width, pitch, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn pitch(&self) -> T {
        self.pitch
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    #[cfg(test)]
    pub(crate) fn data_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex<T>> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> Complex<T> {
        self.data[row * self.width + col]
    }

    pub fn amplitude(&self) -> Amplitude<T> {
        Amplitude::from_parts(self.height, self.width, self.data.iter().map(|z| z.norm()).collect())
    }

    /// Squared L2 norm.
    pub fn energy(&self) -> T {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn map(&self, f: impl Fn(Complex<T>) -> Complex<T>) -> Result<Self> {
        Self::new(self.height, self.width, self.pitch, self.data.iter().map(|&z| f(z)).collect())
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.dims() == other.dims()
    }

    /// Largest elementwise modulus of `self - other`.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(T::zero(), T::max)
    }

    pub fn cast<U: Real>(&self) -> ComplexField<U> {
        ComplexField {
            height: self.height,
            width: self.width,
            pitch: U::lit(self.pitch.as_f64()),
            data: self
                .data
                .iter()
                .map(|z| Complex::new(U::lit(z.re.as_f64()), U::lit(z.im.as_f64())))
                .collect(),
        }
    }
}

/// A non-negative real image, typically the target amplitude `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct Amplitude<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> Amplitude<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimensions(format!("image must be at least 1x1, got {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} samples for a {height}x{width} image",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("amplitude"));
        }
        Ok(Self { height, width, data })
    }

    pub(crate) fn from_parts(height: usize, width: usize, data: Vec<T>) -> Self {
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn is_nonnegative(&self) -> bool {
        self.data.iter().all(|&v| v >= T::zero())
    }

    /// Rescales so that the total energy equals the pixel count, i.e. the
    /// energy a unit-amplitude phase-only hologram carries through a unitary
    /// propagator. An all-zero image is returned unchanged.
    pub fn energy_normalized(&self) -> Self {
        let energy: T = self.data.iter().map(|&v| v * v).sum();
        if energy <= T::zero() {
            return self.clone();
        }
        let scale = (T::from_usize_lossy(self.data.len()) / energy).sqrt();
        Self::from_parts(self.height, self.width, self.data.iter().map(|&v| v * scale).collect())
    }

    pub fn cast<U: Real>(&self) -> Amplitude<U> {
        Amplitude {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}
