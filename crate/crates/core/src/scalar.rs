//! Floating-point abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar used for pixels, parameters and divergence values.
///
/// Implemented for `f32` and `f64`. Training and estimation default to `f64`
/// (see the aliases at the crate root); `f32` is only the on-disk pixel width.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal; panics only if the target cannot represent
    /// finite `f64` values at all, which never happens for `f32`/`f64`.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("scalar conversion from f64")
    }

    fn from_usize_lossy(x: usize) -> Self {
        Self::from_usize(x).expect("scalar conversion from usize")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar conversion to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Sums in slice order. Starts from the first element so that a single-element
/// sum is bit-identical to that element.
pub(crate) fn ordered_sum<T: Scalar>(values: &[T]) -> T {
    let mut it = values.iter().copied();
    match it.next() {
        Some(first) => it.fold(first, |acc, v| acc + v),
        None => T::zero(),
    }
}

pub(crate) fn mean<T: Scalar>(values: &[T]) -> T {
    ordered_sum(values) / T::from_usize_lossy(values.len())
}
