//! Floating-point abstraction for the model math.
//!
//! Training and checkpoints default to `f32`; verification code (finite-difference
//! gradient checks, closed-form loss identities) instantiates the same kernels at
//! `f64` where single precision cannot reach the required tolerances.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, NumAssignOps};

pub trait Scalar:
    Float + NumAssignOps + Sum + Send + Sync + Debug + Default + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
