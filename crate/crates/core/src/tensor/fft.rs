//! Unitary 2-D FFTs.
//!
//! Both directions are scaled by `1/sqrt(H*W)`, so `ifft2(fft2(x)) == x` and
//! the transform preserves the L2 norm. Spectra are kept in natural FFT order
//! (DC at index 0); no shifting is applied.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::ComplexField;

/// Planned row/column transforms for one grid size.
#[derive(Clone)]
pub struct Fft2<T: Real> {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
    scale: T,
}

impl<T: Real> std::fmt::Debug for Fft2<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2").field("height", &self.height).field("width", &self.width).finish()
    }
}

impl<T: Real> Fft2<T> {
    pub fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            height,
            width,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
            scale: T::one() / T::from_usize_lossy(height * width).sqrt(),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn forward(&self, data: &mut [Complex<T>]) {
        self.run(data, &self.row_fwd, &self.col_fwd);
    }

    pub fn inverse(&self, data: &mut [Complex<T>]) {
        self.run(data, &self.row_inv, &self.col_inv);
    }

    fn run(&self, data: &mut [Complex<T>], rows: &Arc<dyn Fft<T>>, cols: &Arc<dyn Fft<T>>) {
        let (h, w) = (self.height, self.width);
        assert_eq!(data.len(), h * w, "buffer does not match the planned grid");
        let zero = Complex::new(T::zero(), T::zero());
        let mut scratch = vec![zero; rows.get_inplace_scratch_len().max(cols.get_inplace_scratch_len())];
        rows.process_with_scratch(data, &mut scratch);
        if h > 1 {
            let mut column = vec![zero; h];
            for c in 0..w {
                for r in 0..h {
                    column[r] = data[r * w + c];
                }
                cols.process_with_scratch(&mut column, &mut scratch);
                for r in 0..h {
                    data[r * w + c] = column[r];
                }
            }
        }
        for z in data.iter_mut() {
            *z = *z * self.scale;
        }
    }
}

fn check_finite<T: Real>(field: &ComplexField<T>) -> Result<()> {
    if field.data().iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NonFinite("fft input"));
    }
    Ok(())
}

/// Unitary forward 2-D DFT of a field. The pitch is carried through unchanged.
pub fn fft2<T: Real>(field: &ComplexField<T>) -> Result<ComplexField<T>> {
    check_finite(field)?;
    let plan = Fft2::new(field.height(), field.width());
    let mut data = field.data().to_vec();
    plan.forward(&mut data);
    Ok(ComplexField::from_parts(field.height(), field.width(), field.pitch(), data))
}

/// Unitary inverse 2-D DFT.
pub fn ifft2<T: Real>(field: &ComplexField<T>) -> Result<ComplexField<T>> {
    check_finite(field)?;
    let plan = Fft2::new(field.height(), field.width());
    let mut data = field.data().to_vec();
    plan.inverse(&mut data);
    Ok(ComplexField::from_parts(field.height(), field.width(), field.pitch(), data))
}

/// Moves the sample at `(h/2, w/2)` to index `(0, 0)`.
pub fn ifftshift<T: Copy>(data: &[T], height: usize, width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for r in 0..height {
        let sr = (r + height / 2) % height;
        for c in 0..width {
            let sc = (c + width / 2) % width;
            out.push(data[sr * width + sc]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(h: usize, w: usize, seed: u64) -> ComplexField<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexField::from_fn(h, w, 1.0, |_, _| {
            Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
        .unwrap()
    }

    #[test]
    fn delta_has_flat_spectrum() {
        let mut data = vec![Complex::new(0.0, 0.0); 8 * 4];
        data[0] = Complex::new(1.0, 0.0);
        let field = ComplexField::new(8, 4, 1e-6, data).unwrap();
        let spectrum = fft2(&field).unwrap();
        let expected = 1.0 / (32f64).sqrt();
        for z in spectrum.data() {
            assert!((z.re - expected).abs() < 1e-15 && z.im.abs() < 1e-15);
        }
    }

    #[test]
    fn round_trip_and_parseval() {
        let x = random_field(64, 64, 7);
        let spectrum = fft2(&x).unwrap();
        let back = ifft2(&spectrum).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-12);
        let rel = (spectrum.energy().sqrt() - x.energy().sqrt()).abs() / x.energy().sqrt();
        assert!(rel < 1e-12);
    }

    #[test]
    fn non_square_and_single_row() {
        for (h, w) in [(1, 16), (16, 1), (6, 10), (1, 1)] {
            let x = random_field(h, w, 3);
            let back = ifft2(&fft2(&x).unwrap()).unwrap();
            assert!(back.max_abs_diff(&x) < 1e-12, "{h}x{w}");
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut x = random_field(4, 4, 1);
        x.data_mut()[5] = Complex::new(f64::NAN, 0.0);
        assert!(matches!(fft2(&x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn ifftshift_centers_axis_sample() {
        let data: Vec<usize> = (0..12).collect();
        let shifted = ifftshift(&data, 3, 4);
        // (1, 2) is the axis sample for a 3x4 grid.
        assert_eq!(shifted[0], 4 + 2);
    }
}
