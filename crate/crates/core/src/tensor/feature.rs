use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{Kind, Tensor};

/// Default stabilizer for complex layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Channel-major (`C x H x W`) complex feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<Complex<T>>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<Complex<T>>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Dimensions(format!(
                "feature map must be non-empty, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {channels}x{height}x{width} feature map",
                data.len()
            )));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite("feature map"));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> Complex<T>,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for r in 0..height {
                for col in 0..width {
                    data.push(f(c, r, col));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> Complex<T> {
        self.data[(channel * self.height + row) * self.width + col]
    }

    /// The `C` values stored at one spatial location.
    pub fn pixel(&self, row: usize, col: usize) -> Vec<Complex<T>> {
        (0..self.channels).map(|c| self.get(c, row, col)).collect()
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(&[self.channels, self.height, self.width], self.data.clone(), Kind::Complex)
            .expect("consistent shape")
    }

    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        match *t.shape() {
            [c, h, w] => Self::new(c, h, w, t.data().to_vec()),
            _ => Err(Error::ShapeMismatch(format!("expected a rank-3 tensor, got {:?}", t.shape()))),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).norm()).fold(T::zero(), T::max)
    }

    pub fn scaled_by(&self, s: Complex<T>) -> Self {
        Self { data: self.data.iter().map(|&z| z * s).collect(), ..self.clone() }
    }
}

/// Fractional `(row, col)` sample positions in feature-map pixel units.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleGrid<T> {
    pub points: Vec<(T, T)>,
}

impl<T: Real> SampleGrid<T> {
    pub fn new(points: Vec<(T, T)>) -> Self {
        Self { points }
    }

    /// Clamps every point into `[0, height-1] x [0, width-1]`.
    pub fn clamped(&self, height: usize, width: usize) -> Self {
        let hmax = T::from_usize_lossy(height - 1);
        let wmax = T::from_usize_lossy(width - 1);
        Self {
            points: self
                .points
                .iter()
                .map(|&(r, c)| (r.max(T::zero()).min(hmax), c.max(T::zero()).min(wmax)))
                .collect(),
        }
    }
}

/// `<x, y> = sum_j x_j * conj(y_j)`.
pub fn hermitian_inner<T: Real>(x: &[Complex<T>], y: &[Complex<T>]) -> Result<Complex<T>> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "hermitian inner product of lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    Ok(x.iter().zip(y).fold(Complex::new(T::zero(), T::zero()), |acc, (a, b)| acc + a * b.conj()))
}

/// Per-location statistics produced by [`layer_norm_kernel`].
pub(crate) struct LayerNormOut<T> {
    pub output: Vec<Complex<T>>,
    pub normalized: Vec<Complex<T>>,
    pub inv_std: Vec<T>,
}

/// Normalizes `data` (`channels` rows of `locations` values) across channels
/// at each location: subtract the complex mean, divide by
/// `sqrt(var(re) + var(im) + eps)`, then apply `gamma * n + beta` per channel.
pub(crate) fn layer_norm_kernel<T: Real>(
    data: &[Complex<T>],
    channels: usize,
    locations: usize,
    gamma: &[Complex<T>],
    beta: &[Complex<T>],
    eps: T,
) -> LayerNormOut<T> {
    let zero = Complex::new(T::zero(), T::zero());
    let inv_c = T::one() / T::from_usize_lossy(channels);
    let mut mean = vec![zero; locations];
    for c in 0..channels {
        let row = &data[c * locations..(c + 1) * locations];
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m = *m * inv_c;
    }
    let mut var = vec![T::zero(); locations];
    for c in 0..channels {
        let row = &data[c * locations..(c + 1) * locations];
        for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
            *v += (x - m).norm_sqr();
        }
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v * inv_c + eps).sqrt()).collect();
    let mut normalized = vec![zero; data.len()];
    let mut output = vec![zero; data.len()];
    for c in 0..channels {
        let range = c * locations..(c + 1) * locations;
        let (g, b) = (gamma[c], beta[c]);
        for (((n, o), &x), (&m, &s)) in normalized[range.clone()]
            .iter_mut()
            .zip(&mut output[range.clone()])
            .zip(&data[range])
            .zip(mean.iter().zip(&inv_std))
        {
            *n = (x - m) * s;
            *o = g * *n + b;
        }
    }
    LayerNormOut { output, normalized, inv_std }
}

/// Complex layer normalization across channels with per-channel complex
/// affine `(gamma, beta)`.
pub fn complex_layer_norm<T: Real>(
    f: &FeatureMap<T>,
    gamma: &[Complex<T>],
    beta: &[Complex<T>],
    eps: T,
) -> Result<FeatureMap<T>> {
    if gamma.len() != f.channels() || beta.len() != f.channels() {
        return Err(Error::ShapeMismatch(format!(
            "affine of length {}/{} for {} channels",
            gamma.len(),
            beta.len(),
            f.channels()
        )));
    }
    let out = layer_norm_kernel(f.data(), f.channels(), f.height() * f.width(), gamma, beta, eps);
    FeatureMap::new(f.channels(), f.height(), f.width(), out.output)
}

/// Interpolation stencil for one sample position.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BilinearTap<T> {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
    pub fr: T,
    pub fc: T,
    /// False when the row coordinate was clamped (zero derivative).
    pub row_free: bool,
    pub col_free: bool,
}

impl<T: Real> BilinearTap<T> {
    pub fn new(row: T, col: T, height: usize, width: usize) -> Self {
        let (r0, r1, fr, row_free) = axis(row, height);
        let (c0, c1, fc, col_free) = axis(col, width);
        Self { r0, r1, c0, c1, fr, fc, row_free, col_free }
    }

    /// Weights for `(r0,c0), (r0,c1), (r1,c0), (r1,c1)`.
    pub fn weights(&self) -> [T; 4] {
        let one = T::one();
        [
            (one - self.fr) * (one - self.fc),
            (one - self.fr) * self.fc,
            self.fr * (one - self.fc),
            self.fr * self.fc,
        ]
    }

    pub fn indices(&self, width: usize) -> [usize; 4] {
        [
            self.r0 * width + self.c0,
            self.r0 * width + self.c1,
            self.r1 * width + self.c0,
            self.r1 * width + self.c1,
        ]
    }

    /// Derivatives of the four weights with respect to row and column.
    pub fn weight_derivatives(&self) -> ([T; 4], [T; 4]) {
        let one = T::one();
        let z = T::zero();
        let drow = if self.row_free {
            [-(one - self.fc), -self.fc, one - self.fc, self.fc]
        } else {
            [z; 4]
        };
        let dcol = if self.col_free {
            [-(one - self.fr), one - self.fr, -self.fr, self.fr]
        } else {
            [z; 4]
        };
        (drow, dcol)
    }
}

fn axis<T: Real>(x: T, n: usize) -> (usize, usize, T, bool) {
    let max = T::from_usize_lossy(n - 1);
    let free = x > T::zero() && x < max;
    let xc = x.max(T::zero()).min(max);
    let i0 = xc.floor().to_usize().unwrap_or(0).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, xc - T::from_usize_lossy(i0), free)
}

/// Bilinearly interpolates every channel at each grid point (after clamping).
pub fn bilinear_sample<T: Real>(f: &FeatureMap<T>, grid: &SampleGrid<T>) -> Vec<Vec<Complex<T>>> {
    let (h, w) = (f.height(), f.width());
    let plane = h * w;
    grid.points
        .iter()
        .map(|&(r, c)| {
            let tap = BilinearTap::new(r, c, h, w);
            let idx = tap.indices(w);
            let wt = tap.weights();
            (0..f.channels())
                .map(|ch| {
                    let base = &f.data()[ch * plane..(ch + 1) * plane];
                    (0..4).fold(Complex::new(T::zero(), T::zero()), |acc, k| acc + base[idx[k]] * wt[k])
                })
                .collect()
        })
        .collect()
}
