//! Dense linear algebra and hand-differentiated layer primitives.
//!
//! Everything here is generic over [`Scalar`] so the same code runs in
//! 32-bit precision for training and in 64-bit precision for finite
//! difference gradient checks.

mod gradcheck;
mod kmeans;
mod layers;
mod matrix;
mod optim;
mod rng;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

pub use gradcheck::{check_gradients, finite_difference_check, relative_error, HasParameters};
pub use kmeans::{kmeans, nearest_row, KMeansResult};
pub use layers::{
    leaky_relu, leaky_relu_grad, softmax_masked, Activation, Linear, Mlp, MlpCache,
    DEFAULT_LEAKY_SLOPE,
};
pub use matrix::{DenseMatrix, Matrix, Parameter};
pub use optim::{AdamW, AdamWConfig};
pub use rng::Rng;

/// Floating-point element type used by every model in the crate.
pub trait Scalar:
    num_traits::Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn as_f32(self) -> f32;
}

impl Scalar for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self as f32
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("softmax over an empty neighborhood")]
    EmptyNeighborhood,
    #[error("invalid argument: {0}")]
    Argument(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> NumericsError {
    NumericsError::Dimension {
        op,
        detail: detail.into(),
    }
}

/// Squared Euclidean distance between two equal-length slices.
#[inline]
pub fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        let d = *x - *y;
        acc += d * d;
    }
    acc
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}
