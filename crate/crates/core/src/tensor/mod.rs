//! Complex field and tensor arithmetic: unitary FFTs, the Hermitian inner
//! product, complex layer normalization and bilinear sampling.

mod dense;
mod feature;
mod fft;
mod field;

pub use dense::{Kind, Tensor};
pub use feature::{
    bilinear_sample, complex_layer_norm, hermitian_inner, FeatureMap, SampleGrid, LAYER_NORM_EPS,
};
pub(crate) use feature::{layer_norm_kernel, BilinearTap};
pub use fft::{fft2, ifft2, ifftshift, Fft2};
pub use field::{Amplitude, ComplexField};
