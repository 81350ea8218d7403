//! Scalar element abstraction.
//!
//! Training runs in `f32`; every gradient-check suite runs the identical code
//! in `f64` so that central finite differences are meaningful at tolerance
//! 1e-4. The [`Element`] trait is the small bound both instantiations share.

use num_traits::Float;

/// Floor applied to probabilities before any logarithm.
pub const PROB_FLOOR: f64 = 1e-8;

/// Scalar type the numeric stack is generic over (`f32` or `f64`).
pub trait Element:
    Float
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `ln(clamp(x, PROB_FLOOR, 1))` — the only logarithm the stack takes.
    fn ln_clamped(self) -> Self {
        self.clamp_prob().ln()
    }

    /// Clamp into the valid probability range `[PROB_FLOOR, 1]`.
    fn clamp_prob(self) -> Self {
        let lo = Self::from_f64(PROB_FLOOR);
        let hi = Self::one();
        if self < lo {
            lo
        } else if self > hi {
            hi
        } else {
            self
        }
    }
}

impl Element for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Shorthand conversion used all over the numeric code.
pub fn e<E: Element>(x: f64) -> E {
    E::from_f64(x)
}
