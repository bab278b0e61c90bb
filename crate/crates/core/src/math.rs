//! Transcendental functions pinned to `libm`.
//!
//! Method calls such as `x.exp()` resolve to the platform math library or
//! to `libm` depending on which `std` features other crates in the build
//! switch on. The last-bit differences are harmless in one evaluation but
//! training amplifies them, so every transcendental call goes through here.

use core::f64::consts::PI;

use rand::Rng;

pub(crate) fn exp(x: f64) -> f64 {
    libm::exp(x)
}

pub(crate) fn ln(x: f64) -> f64 {
    libm::log(x)
}

pub(crate) fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

pub(crate) fn sin(x: f64) -> f64 {
    libm::sin(x)
}

pub(crate) fn cos(x: f64) -> f64 {
    libm::cos(x)
}

pub(crate) fn asin(x: f64) -> f64 {
    libm::asin(x)
}

pub(crate) fn atan2(y: f64, x: f64) -> f64 {
    libm::atan2(y, x)
}

pub(crate) fn powi(x: f64, n: i32) -> f64 {
    libm::pow(x, n as f64)
}

/// One standard normal draw by Box-Muller; consumes two uniforms.
pub(crate) fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // 1 - [0, 1) keeps the log argument away from zero
    let u1 = 1.0 - rng.random::<f64>();
    let u2 = rng.random::<f64>();
    libm::sqrt(-2.0 * ln(u1)) * cos(2.0 * PI * u2)
}
