//! Scalar abstraction and the smooth profiles shared across the crate.
//!
//! Everything numeric is generic over [`Real`], which is satisfied by `f32`
//! and `f64`. Concrete `f64` aliases live at the crate root.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar: `f32` or `f64`.
pub trait Real: RealField + FromPrimitive + ToPrimitive + Copy + Default {}

impl<T> Real for T where T: RealField + FromPrimitive + ToPrimitive + Copy + Default {}

/// Converts an `f64` literal into the working scalar.
#[inline]
pub fn real<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("finite literal")
}

/// Lossy conversion back to `f64` for reports and serialization.
#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    x.to_f64().expect("finite scalar")
}

/// The standard C-infinity bump profile on `(-1, 1)`, normalized to sup 1:
/// `exp(1 - 1/(1 - s^2))` inside, identically 0 outside.
pub fn bump<T: Real>(s: T) -> T {
    let one = T::one();
    if s * s >= one {
        return T::zero();
    }
    (one - one / (one - s * s)).exp()
}

/// First derivative of [`bump`].
pub fn bump_d1<T: Real>(s: T) -> T {
    let one = T::one();
    if s * s >= one {
        return T::zero();
    }
    let w = one - s * s;
    // d/ds [1 - 1/w] = -2s / w^2
    bump(s) * (-real::<T>(2.0) * s / (w * w))
}

/// Second derivative of [`bump`].
pub fn bump_d2<T: Real>(s: T) -> T {
    let one = T::one();
    if s * s >= one {
        return T::zero();
    }
    let two = real::<T>(2.0);
    let w = one - s * s;
    let g = -two * s / (w * w); // (log bump)'
    let gp = (-two * w - real::<T>(8.0) * s * s) / (w * w * w); // g'
    bump(s) * (g * g + gp)
}

/// C-infinity step: 0 for `t <= 0`, 1 for `t >= 1`, monotone in between.
pub fn smooth_step<T: Real>(t: T) -> T {
    let zero = T::zero();
    let one = T::one();
    if t <= zero {
        return zero;
    }
    if t >= one {
        return one;
    }
    let a = (-one / t).exp();
    let b = (-one / (one - t)).exp();
    a / (a + b)
}
