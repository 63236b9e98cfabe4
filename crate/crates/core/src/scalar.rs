//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point type the MDP, policy, estimator and optimizer code is written against.
///
/// Implemented for `f32` and `f64`. The harness and CLI run on `f64`.
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
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Tolerance used when checking that a probability row sums to one.
    fn normalization_tolerance() -> Self;

    /// Lossless-enough conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {
    fn normalization_tolerance() -> Self {
        64.0 * f32::EPSILON
    }
}

impl Scalar for f64 {
    fn normalization_tolerance() -> Self {
        1e-12
    }
}

/// Neumaier-compensated sum; deterministic for a fixed input order.
pub fn compensated_sum<S: Scalar>(values: impl IntoIterator<Item = S>) -> S {
    let mut sum = S::zero();
    let mut carry = S::zero();
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

/// `log(sum(exp(x)))` over a slice, stable for large magnitudes.
pub fn log_sum_exp<S: Scalar>(xs: &[S]) -> S {
    let max = xs.iter().copied().fold(S::neg_infinity(), S::max);
    if max == S::neg_infinity() {
        return max;
    }
    let total: S = xs.iter().map(|&x| (x - max).exp()).sum();
    max + total.ln()
}

/// Seventeen significant digits in scientific notation; round-trips any `f64`.
pub fn format_real<S: Scalar>(x: S) -> String {
    format!("{:.16e}", x.as_f64())
}
