//! Phase-only hologram synthesis by deep unfolding.
//!
//! The forward model maps an SLM field `x` to the image-plane amplitude
//! `|Phi x|`, where `Phi` is free-space propagation chosen by distance
//! ([`propagation`]). [`solvers`] holds the gradient step, Gerchberg-Saxton
//! and the unfolded solver; [`pcd`] is the complex-valued denoiser applied
//! after each gradient step, and [`train`] fits its weights through the
//! reverse-mode tape in [`autodiff`].
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`). The aliases below
//! fix the precision for callers that do not need the parameter.

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod grayscale;
pub mod metrics;
pub mod pcd;
pub mod propagation;
pub mod scalar;
pub mod solvers;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Real;

pub type ComplexField32 = tensor::ComplexField<f32>;
pub type ComplexField64 = tensor::ComplexField<f64>;
pub type Amplitude32 = tensor::Amplitude<f32>;
pub type Amplitude64 = tensor::Amplitude<f64>;
pub type PropagationPlan32 = propagation::PropagationPlan<f32>;
pub type PropagationPlan64 = propagation::PropagationPlan<f64>;
pub type Hologram32 = solvers::Hologram<f32>;
pub type Hologram64 = solvers::Hologram<f64>;
pub type PcdWeights32 = pcd::PcdWeights<f32>;
pub type PcdWeights64 = pcd::PcdWeights<f64>;
