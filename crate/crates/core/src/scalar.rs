//! Scalar abstraction so the whole stack runs in either f32 or f64.
//!
//! Training runs use f32; gradient checks and the algebraic identity
//! suite need f64 headroom.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar usable as tensor element type.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Sum<Self> + Send + Sync + 'static
{
    /// Lossy conversion from f64; every constant in the crate goes through here.
    fn from_f64_c(value: f64) -> Self {
        <Self as FromPrimitive>::from_f64(value).expect("finite f64 converts to any Scalar")
    }

    /// Widening conversion used by metrics and serialization.
    fn to_f64_c(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
