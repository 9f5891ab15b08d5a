//! Scalar abstraction for the numerical core.
//!
//! All math in this crate is generic over [`Real`], which is satisfied by
//! `f32` and `f64`. Concrete aliases for the common types live at the crate
//! root.

use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar used throughout the dynamics and control code.
pub trait Real: nalgebra::RealField + Copy + FromPrimitive + ToPrimitive {}

impl<T> Real for T where T: nalgebra::RealField + Copy + FromPrimitive + ToPrimitive {}

/// Lossy conversion back to `f64` for diagnostics and logging.
#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    x.to_f64().expect("scalar convertible to f64")
}

/// Convert an `f64` literal into the working scalar type.
#[inline]
pub fn real<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal not representable in scalar type")
}

/// A tolerance that keeps its double-precision value but widens for scalar
/// types whose machine epsilon would otherwise drown it in rounding noise.
#[inline]
pub fn scaled_tol<T: Real>(f64_value: f64, epsilon_factor: f64) -> T {
    let floor = T::default_epsilon() * real(epsilon_factor);
    real::<T>(f64_value).max(floor)
}
