//! Scalar abstraction shared by the piecewise-linear and density kernels.
//!
//! Objective evaluation and kink scanning only need ordered-field
//! arithmetic, so they run over [`Scalar`], which also covers exact
//! rationals. Density, kernel and interval code needs transcendental
//! functions and runs over [`RealScalar`] (`f32` / `f64`).

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, Num, Signed, ToPrimitive};

pub trait Scalar:
    Num + Signed + Copy + PartialOrd + FromPrimitive + ToPrimitive + Debug + Send + Sync + 'static
{
    /// Largest difference between two objective values of magnitude
    /// `scale` that is still treated as a tie.
    fn tie_slack(scale: Self) -> Self;

    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("value representable in scalar type")
    }
}

impl Scalar for f64 {
    fn tie_slack(scale: Self) -> Self {
        1e-12 * (1.0 + scale.abs())
    }
}

impl Scalar for f32 {
    fn tie_slack(scale: Self) -> Self {
        1e-5 * (1.0 + scale.abs())
    }
}

macro_rules! exact_ratio {
    ($($int:ty),*) => {$(
        impl Scalar for num_rational::Ratio<$int> {
            fn tie_slack(_scale: Self) -> Self {
                Self::from_integer(0)
            }
        }
    )*};
}

exact_ratio!(i64, i128);

/// Floating-point scalar with the transcendental functions needed by
/// densities, kernels and interval construction.
pub trait RealScalar: Scalar + Float {
    fn frac_1_sqrt_2pi() -> Self {
        Self::from_f64_lossy(0.398_942_280_401_432_7)
    }
}

impl RealScalar for f32 {}
impl RealScalar for f64 {}

/// Standard normal cumulative distribution function.
pub fn normal_cdf<T: RealScalar>(z: T) -> T {
    let v = z.to_f64().unwrap_or(f64::NAN);
    T::from_f64_lossy(0.5 * statrs::function::erf::erfc(-v / std::f64::consts::SQRT_2))
}

/// Standard normal density.
pub fn normal_pdf<T: RealScalar>(z: T) -> T {
    let half = T::from_f64_lossy(0.5);
    T::frac_1_sqrt_2pi() * (-half * z * z).exp()
}

/// Inverse of the standard normal cdf.
pub fn normal_quantile(p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::standard().inverse_cdf(p)
}
