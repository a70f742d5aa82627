//! Scalar abstraction so the advantage and policy math runs at f32 or f64.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumCast, ToPrimitive};

/// Floating-point scalar used throughout the credit-assignment math.
///
/// The harness and CLI instantiate everything at `f64` (see the aliases at
/// the crate root); f32 is available for callers that want it.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + serde::Serialize
    + serde::de::DeserializeOwned
    + 'static
{
    /// Cast an `f64` literal or config value into the scalar type.
    #[inline]
    fn cast(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 value representable in scalar type")
    }

    /// Cast a count into the scalar type (for means over counts).
    #[inline]
    fn cast_usize(n: usize) -> Self {
        <Self as NumCast>::from(n).expect("count representable in scalar type")
    }

    /// Widen to f64 for reporting and CSV output.
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
