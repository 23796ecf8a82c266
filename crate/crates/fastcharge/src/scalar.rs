//! Scalar abstraction so the numerical core works with `f32` or `f64`.

use std::fmt::{Debug, Display, LowerExp};

/// Floating-point scalar used throughout the numerical core.
///
/// Implemented for `f32` and `f64`. All literals inside the core are written
/// as `f64` and converted through [`cast`], so a run with a given seed draws
/// the same random sequence regardless of the scalar type.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssignOps
    + Debug
    + Display
    + LowerExp
    + Default
    + Send
    + Sync
    + 'static
{
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Convert an `f64` literal or intermediate into the working scalar type.
pub fn cast<S: Scalar>(v: f64) -> S {
    num_traits::FromPrimitive::from_f64(v).expect("finite f64 converts to scalar")
}
