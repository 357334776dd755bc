//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type: `f32` or `f64`.
///
/// Compute paths are written against this trait; the crate root exposes
/// `f64` aliases since that is the precision used for training.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + LowerExp
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// `log(sum(exp(x)))` over an iterator, shifted by the maximum.
///
/// Returns `-inf` for an empty iterator or when every element is `-inf`.
pub fn log_sum_exp<T: Scalar, I>(values: I) -> T
where
    I: IntoIterator<Item = T> + Clone,
{
    let max = values
        .clone()
        .into_iter()
        .fold(T::neg_infinity(), |acc, v| acc.max(v));
    if max == T::neg_infinity() {
        return max;
    }
    let sum: T = values.into_iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Ascending comparison with a total order so NaN never panics a sort.
#[inline]
pub fn total_cmp<T: Scalar>(a: T, b: T) -> std::cmp::Ordering {
    a.to_f64_lossy().total_cmp(&b.to_f64_lossy())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lse_matches_naive_on_small_values() {
        let xs = [0.1_f64, -0.3, 2.0];
        let naive = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(xs.iter().copied()) - naive).abs() < 1e-14);
    }

    #[test]
    fn lse_survives_large_magnitudes() {
        let xs = [-1000.0_f64, -1000.0];
        let v = log_sum_exp(xs.iter().copied());
        assert!((v - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        let empty: [f32; 0] = [];
        assert_eq!(log_sum_exp(empty.iter().copied()), f32::NEG_INFINITY);
    }
}
