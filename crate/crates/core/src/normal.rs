//! Standard normal density, distribution and the Mills ratio.

use std::f64::consts::{PI, SQRT_2};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Below this argument `exp(x^2) erfc(x)` is evaluated directly; above it a
/// continued fraction is used.
const ERFCX_SWITCH: f64 = 5.0;

pub fn pdf(t: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * t * t).exp()
}

pub fn cdf(t: f64) -> f64 {
    0.5 * libm::erfc(-t / SQRT_2)
}

/// Upper tail `1 - Φ(t)` without cancellation.
pub fn sf(t: f64) -> f64 {
    0.5 * libm::erfc(t / SQRT_2)
}

/// Scaled complementary error function `exp(x^2) erfc(x)`.
pub fn erfcx(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x < 0.0 {
        return 2.0 * (x * x).exp() - erfcx(-x);
    }
    if x < ERFCX_SWITCH {
        return (x * x).exp() * libm::erfc(x);
    }
    // Laplace continued fraction, evaluated backwards.
    let mut f = x;
    for n in (1..=60).rev() {
        f = x + (n as f64 * 0.5) / f;
    }
    1.0 / (PI.sqrt() * f)
}

/// Mills ratio `(1 - Φ(t)) / φ(t)`, stable for large positive `t`.
pub fn mills_ratio(t: f64) -> f64 {
    (PI / 2.0).sqrt() * erfcx(t / SQRT_2)
}
