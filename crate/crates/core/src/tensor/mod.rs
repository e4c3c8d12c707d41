//! Minimal CPU tensor stack: NCHW ops plus a tape autodiff graph.
//!
//! Everything is generic over [`Scalar`] so the training path runs in f32
//! while gradient checks run the identical code in f64.

pub mod graph;
pub mod ops;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

pub use graph::{Gradients, Graph, Var};

/// Element type bound for every tensor op in the crate.
pub trait Scalar:
    Float + FromPrimitive + ScalarOperand + LinalgScalar + std::fmt::Debug + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand f64 -> F cast; panics only if F cannot represent finite f64,
/// which cannot happen for f32/f64.
#[inline]
pub fn fl<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("finite literal")
}

/// F -> f64 cast for reporting.
#[inline]
pub fn to_f64<F: Scalar>(x: F) -> f64 {
    x.to_f64().expect("finite value")
}
