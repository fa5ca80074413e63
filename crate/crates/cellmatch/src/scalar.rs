//! Scalar abstraction for the numeric core.
//!
//! Everything numeric in this crate is generic over [`Real`], so the same
//! algorithms run in `f32` or `f64`. Concrete aliases for the common `f64`
//! instantiation live at the crate root.

use std::cmp::Ordering;
use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumCast, ToPrimitive};

/// Floating-point scalar used throughout the crate.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + serde::Serialize
    + serde::de::DeserializeOwned
    + 'static
{
    /// Lossy conversion from any primitive number; panics only on values that
    /// have no representation at all (never the case for finite f64 -> f32/f64).
    fn cast<T: ToPrimitive>(x: T) -> Self {
        NumCast::from(x).expect("numeric cast")
    }

    fn half() -> Self {
        Self::cast(0.5)
    }

    fn two() -> Self {
        Self::cast(2.0)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Total order for scalars that are known to be non-NaN.
///
/// NaN compares equal to everything so sorts stay deterministic even if one
/// sneaks in; callers that care validate inputs beforehand.
pub fn fcmp<F: Real>(a: &F, b: &F) -> Ordering {
    a.partial_cmp(b).unwrap_or(Ordering::Equal)
}

/// `a < b` with the same NaN tolerance as [`fcmp`].
pub fn flt<F: Real>(a: F, b: F) -> bool {
    fcmp(&a, &b) == Ordering::Less
}
