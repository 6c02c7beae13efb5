//! Floating-point abstraction shared by the numerical modules.

use std::iter::Sum;

use ndarray::NdFloat;
use num_traits::FromPrimitive;

/// Real scalar the estimator can run on.
///
/// Implemented for `f32` and `f64`. Tolerances that depend on machine
/// precision are exposed here so generic code never hard-codes an `f64`
/// constant.
pub trait Scalar: NdFloat + FromPrimitive + Sum + Default + 'static {
    /// Relative spectral cutoff used by pseudo-inverses and pseudo-determinants.
    fn default_rank_tol() -> Self;

    /// Lossy conversion from `f64`, for constants and configuration values.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar converts to f64")
    }
}

impl Scalar for f64 {
    fn default_rank_tol() -> Self {
        1e-12
    }
}

impl Scalar for f32 {
    fn default_rank_tol() -> Self {
        1e-6
    }
}
