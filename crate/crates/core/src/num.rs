//! Scalar abstraction so the differentiable paths run in f32 for training and
//! f64 for gradient checks.

use std::fmt::{Debug, Display};

pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn as_f64(self) -> f64;
    fn from_f64(x: f64) -> Self;
}

impl Scalar for f32 {
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(x: f64) -> Self {
        x as f32
    }
}

impl Scalar for f64 {
    fn as_f64(self) -> f64 {
        self
    }
    fn from_f64(x: f64) -> Self {
        x
    }
}

/// Shorthand for lifting an f64 constant into the working scalar type.
#[inline]
pub fn c<T: Scalar>(x: f64) -> T {
    T::from_f64(x)
}
