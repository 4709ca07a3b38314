//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! Everything that stores or transforms numbers is generic over [`Scalar`].
//! The crate root exposes `f64` aliases, which is what the model, training
//! loop and file formats use by default.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real floating-point scalar usable as a tensor element.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Converts an `f64` literal. Panics only for values the type cannot hold,
    /// which never happens for the IEEE float implementors.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("scalar literal out of range")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }

    /// Gauss error function.
    fn error_fn(self) -> Self;
}

impl Scalar for f64 {
    #[inline]
    fn error_fn(self) -> Self {
        libm::erf(self)
    }
}

impl Scalar for f32 {
    #[inline]
    fn error_fn(self) -> Self {
        libm::erff(self)
    }
}
