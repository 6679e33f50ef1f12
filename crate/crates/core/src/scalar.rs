//! Scalar abstraction for the numeric parts of the runtime (relevance
//! scoring, embedding vectors, cosine similarity).

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumCast};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point scalar: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + NumCast + Debug + Display + Default + Serialize + DeserializeOwned + Send + Sync + 'static
{
    /// Lossy conversion used at serialization boundaries.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn from_f64_lossy(value: f64) -> Self {
        <Self as NumCast>::from(value).unwrap_or_else(Self::nan)
    }

    fn from_count(count: usize) -> Self {
        <Self as NumCast>::from(count).unwrap_or_else(Self::infinity)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean<F: Scalar>(xs: &[F]) -> F {
        let sum = xs.iter().fold(F::zero(), |acc, &x| acc + x);
        sum / F::from_count(xs.len())
    }

    #[test]
    fn generic_over_both_widths() {
        assert_eq!(mean(&[1.0f64, 2.0, 3.0]), 2.0);
        assert_eq!(mean(&[1.0f32, 2.0, 3.0]), 2.0);
        assert_eq!(f32::from_f64_lossy(0.5).to_f64_lossy(), 0.5);
    }
}
