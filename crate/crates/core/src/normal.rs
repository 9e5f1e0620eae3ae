//! Standard normal density, distribution function and their logs.

use libm::erfc;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[inline]
pub fn pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

#[inline]
pub fn ln_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

#[inline]
pub fn cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// `ln Φ(x)`, accurate deep into the lower tail.
pub fn ln_cdf(x: f64) -> f64 {
    if x > -30.0 {
        cdf(x).ln()
    } else {
        // asymptotic series of the Mills ratio
        let x2 = x * x;
        let series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2);
        ln_pdf(x) - (-x).ln() + series.ln()
    }
}

/// `φ(x) / Φ(x)` without forming the two factors separately.
#[inline]
pub fn mills_lower(x: f64) -> f64 {
    (ln_pdf(x) - ln_cdf(x)).exp()
}

pub fn inv_cdf(p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::standard().inverse_cdf(p)
}
