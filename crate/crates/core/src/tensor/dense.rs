use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Whether a tensor is constrained to the real axis.
///
/// Real tensors store their values with a zero imaginary part; gradients
/// flowing into them are projected back onto the real axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Kind {
    Real,
    Complex,
}

/// Dense n-d array of complex values, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<Complex<T>>,
    kind: Kind,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize], kind: Kind) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![Complex::new(T::zero(), T::zero()); n], kind }
    }

    pub fn new(shape: &[usize], data: Vec<Complex<T>>, kind: Kind) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!("{} values for shape {shape:?}", data.len())));
        }
        let mut t = Self { shape: shape.to_vec(), data, kind };
        if kind == Kind::Real {
            t.project_real();
        }
        Ok(t)
    }

    pub fn from_real(shape: &[usize], values: &[T]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| Complex::new(v, T::zero())).collect(), Kind::Real)
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![Complex::new(value, T::zero())], kind: Kind::Real }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn kind(&self) -> Kind {
        self.kind
    }

    pub fn is_real(&self) -> bool {
        self.kind == Kind::Real
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex<T>> {
        self.data
    }

    /// Same storage, new shape of equal element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len(), "reshape changes element count");
        self.shape = shape.to_vec();
        self
    }

    pub fn re_values(&self) -> Vec<T> {
        self.data.iter().map(|z| z.re).collect()
    }

    /// Zeroes every imaginary part.
    pub fn project_real(&mut self) {
        for z in &mut self.data {
            z.im = T::zero();
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "tensor add shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for z in &mut self.data {
            *z = *z * s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().map(|z| z.norm()).fold(T::zero(), T::max)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|z| Complex::new(U::lit(z.re.as_f64()), U::lit(z.im.as_f64()))).collect(),
            kind: self.kind,
        }
    }

    /// Number of real degrees of freedom (2 per complex entry).
    pub fn real_dof(&self) -> usize {
        match self.kind {
            Kind::Real => self.data.len(),
            Kind::Complex => 2 * self.data.len(),
        }
    }
}
