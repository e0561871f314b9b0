//! Scalar abstraction: the numeric element type of every tensor.
//!
//! All math in this crate is written against [`Scalar`] so the same code runs
//! at f32 (the default pipeline precision) and f64 (used by the tighter
//! gradient-oracle tests).

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type of tensors: IEEE float with the conversions the crate needs.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Default step size for central finite differences at this precision.
    fn default_fd_eps() -> Self;
}

impl Scalar for f32 {
    fn default_fd_eps() -> Self {
        1e-3
    }
}

impl Scalar for f64 {
    fn default_fd_eps() -> Self {
        1e-6
    }
}

/// Shorthand for converting an f64 literal into the active scalar type.
#[inline]
pub fn lit<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("literal representable in scalar type")
}
