//! Reverse-mode differentiation over complex tensors.

mod conv;
pub mod gradcheck;
mod ops;
mod tape;

pub use ops::AttentionGeometry;
pub(crate) use ops::unit_phase;
pub use tape::{AutodiffError, BackwardCtx, Gradients, Op, Tape, Var};
