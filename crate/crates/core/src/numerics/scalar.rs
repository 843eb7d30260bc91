//! Floating point element types.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar the model and its numerics are generic over: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Short name used in checkpoints.
    const NAME: &'static str;

    /// Gauss error function.
    fn erf(self) -> Self;

    /// Lossless for `f64`, rounding for `f32`.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("every f64 converts to a float")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}
