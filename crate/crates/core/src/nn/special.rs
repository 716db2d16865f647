//! Scalar kernels shared by the autodiff ops and the coder tables.

use std::f64::consts::{FRAC_1_SQRT_2, LN_2, PI};

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Probability mass of the unit-width bin centred on `v` under
/// `N(mu, sigma^2)`, unfloored, with its partial derivatives with respect
/// to `(v, mu, sigma)`.
///
/// Evaluated on the lower tail (`-|v - mu|`) so the CDF difference does not
/// cancel for large offsets.
#[inline]
pub fn gaussian_bin(v: f64, mu: f64, sigma: f64) -> (f64, [f64; 3]) {
    let d = v - mu;
    let ad = d.abs();
    let upper = (0.5 - ad) / sigma;
    let lower = (-0.5 - ad) / sigma;
    let p = normal_cdf(upper) - normal_cdf(lower);
    let (pu, pl) = (normal_pdf(upper), normal_pdf(lower));
    let dp_dad = (pl - pu) / sigma;
    let sign = if d >= 0.0 { 1.0 } else { -1.0 };
    let dv = sign * dp_dad;
    let ds = (lower * pl - upper * pu) / sigma;
    (p, [dv, -dv, ds])
}

/// `-log2(p)` with the same floor used throughout rate estimation.
#[inline]
pub fn bits(p: f64, floor: f64) -> f64 {
    -(p.max(floor)).ln() / LN_2
}
