use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating-point scalar used for probabilities, scores and box coordinates.
pub trait Real:
    Float
    + FromPrimitive
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
    /// Tolerance for "sums to one" checks on distributions this crate computes.
    const NORMALIZATION_TOLERANCE: f64;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

impl Real for f32 {
    const NORMALIZATION_TOLERANCE: f64 = 1e-5;
}

impl Real for f64 {
    const NORMALIZATION_TOLERANCE: f64 = 1e-9;
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax<T: Real>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Sum accumulated in f64 regardless of the scalar type.
pub(crate) fn sum_f64<T: Real>(values: &[T]) -> f64 {
    values.iter().map(|v| v.as_f64()).sum()
}

/// Checks that `values` is a distribution within `tolerance` of summing to one
/// and renormalizes it in place. Vectors already summing to one up to rounding
/// are left untouched so repeated validation is the identity.
pub(crate) fn normalize_distribution<T: Real>(values: &mut [T], tolerance: f64) -> crate::Result<()> {
    if values.is_empty() {
        return Err(crate::Error::EmptyDistribution);
    }
    if values.iter().any(|v| !v.is_finite() || *v < T::zero()) {
        return Err(crate::Error::NegativeProbability);
    }
    let sum = sum_f64(values);
    let deviation = (sum - 1.0).abs();
    if deviation > tolerance {
        return Err(crate::Error::Unnormalized { sum });
    }
    let rounding = values.len() as f64 * T::epsilon().as_f64();
    if deviation > rounding {
        let total = T::lit(sum);
        for v in values.iter_mut() {
            *v /= total;
        }
    }
    Ok(())
}
