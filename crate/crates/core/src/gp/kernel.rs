//! Squared-exponential kernel and its closed-form average over ranges.
//!
//! The SE kernel used throughout is `k(x, x') = α exp(-Σ_d (x_d - x'_d)² / l_d²)`.
//! Integrating it over two ranges `(s, t)` and `(s', t')` gives
//!
//! ```text
//! k_int = α l²/2 [g((t - s')/l) + g((t' - s)/l) - g((t - t')/l) - g((s - s')/l)]
//! g(x)  = x √π erf(x) + exp(-x²)
//! ```
//!
//! and dividing by both widths yields the covariance between the *averages*
//! of the latent function over the two ranges. The kernel is separable, so
//! the multi-dimensional average kernel over boxes is a product of 1-D terms.

use std::f64::consts::PI;

use crate::domain::{check_dim, Interval, Region};
use crate::error::{Error, Result};

use super::GpHyperparams;

const SQRT_PI: f64 = 1.772_453_850_905_516;

/// Width-to-lengthscale ratio below which the closed form is replaced by
/// Gauss-Legendre quadrature (the closed form cancels catastrophically there).
const SMALL_WIDTH: f64 = 0.05;

/// `g(x) = x √π erf(x) + exp(-x²)`.
pub fn g_fn(x: f64) -> f64 {
    x * SQRT_PI * libm::erf(x) + (-x * x).exp()
}

/// Decaying part of `g`: `g(x) = √π |x| + g_tail(|x|)`.
fn g_tail(y: f64) -> f64 {
    let y = y.abs();
    (-y * y).exp() - SQRT_PI * y * libm::erfc(y)
}

pub fn se_kernel(x: &[f64], x2: &[f64], theta: &GpHyperparams) -> Result<f64> {
    check_dim(theta.lengthscales.len(), x.len())?;
    check_dim(x.len(), x2.len())?;
    let r2: f64 = x
        .iter()
        .zip(x2)
        .zip(&theta.lengthscales)
        .map(|((a, b), l)| ((a - b) / l).powi(2))
        .sum();
    Ok(theta.amplitude_sq * (-r2).exp())
}

/// Covariance between the averages of an SE-kernel process over the ranges
/// `a` and `b`.
pub fn avg_kernel_1d(a: Interval, b: Interval, amplitude_sq: f64, lengthscale: f64) -> Result<f64> {
    if !(a.width() > 0.0) {
        return Err(Error::DegenerateRegion { dim: 0, lo: a.lo, hi: a.hi });
    }
    if !(b.width() > 0.0) {
        return Err(Error::DegenerateRegion { dim: 0, lo: b.lo, hi: b.hi });
    }
    Ok(amplitude_sq * unit_avg_1d(a, b, lengthscale))
}

/// Average kernel with `α = 1`; assumes non-degenerate ranges.
pub(crate) fn unit_avg_1d(a: Interval, b: Interval, l: f64) -> f64 {
    let (w1, w2) = (a.width(), b.width());
    if w1.max(w2) < SMALL_WIDTH * l {
        return gauss_legendre_avg(a, b, l);
    }
    let (s, t, s2, t2) = (a.lo / l, a.hi / l, b.lo / l, b.hi / l);
    let args = [t - s2, t2 - s, t - t2, s - s2];
    // The √π|x| parts cancel exactly when the ranges do not overlap.
    let linear = if b.lo >= a.hi || a.lo >= b.hi {
        0.0
    } else {
        SQRT_PI * (args[0].abs() + args[1].abs() - args[2].abs() - args[3].abs())
    };
    let tail = g_tail(args[0]) + g_tail(args[1]) - g_tail(args[2]) - g_tail(args[3]);
    let integral = 0.5 * l * l * (linear + tail);
    (integral / (w1 * w2)).max(0.0)
}

// 8-point Gauss-Legendre on [-1, 1].
const GL_NODES: [f64; 8] = [
    -0.960_289_856_497_536_2,
    -0.796_666_477_413_626_7,
    -0.525_532_409_916_329_0,
    -0.183_434_642_495_649_8,
    0.183_434_642_495_649_8,
    0.525_532_409_916_329_0,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_2,
];
const GL_WEIGHTS: [f64; 8] = [
    0.101_228_536_290_376_3,
    0.222_381_034_453_374_5,
    0.313_706_645_877_887_3,
    0.362_683_783_378_362_0,
    0.362_683_783_378_362_0,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];

fn gauss_legendre_avg(a: Interval, b: Interval, l: f64) -> f64 {
    let (ca, ha) = (0.5 * (a.lo + a.hi), 0.5 * a.width());
    let (cb, hb) = (0.5 * (b.lo + b.hi), 0.5 * b.width());
    let mut acc = 0.0;
    for (xi, wi) in GL_NODES.iter().zip(&GL_WEIGHTS) {
        let x = ca + ha * xi;
        for (yj, wj) in GL_NODES.iter().zip(&GL_WEIGHTS) {
            let y = cb + hb * yj;
            let r = (x - y) / l;
            acc += wi * wj * (-r * r).exp();
        }
    }
    // weights sum to 2 per axis
    acc / 4.0
}

/// Covariance between the averages over two boxes: product of the 1-D
/// average kernels, with the amplitude applied once.
pub fn avg_kernel(r: &Region, r2: &Region, theta: &GpHyperparams) -> Result<f64> {
    check_dim(theta.lengthscales.len(), r.dim())?;
    check_dim(r.dim(), r2.dim())?;
    for reg in [r, r2] {
        if let Some(dim) = reg.degenerate_dim() {
            let s = reg.sides[dim];
            return Err(Error::DegenerateRegion { dim, lo: s.lo, hi: s.hi });
        }
    }
    Ok(avg_kernel_unchecked(r, r2, theta))
}

pub(crate) fn avg_kernel_unchecked(r: &Region, r2: &Region, theta: &GpHyperparams) -> f64 {
    let mut k = theta.amplitude_sq;
    for ((a, b), &l) in r.sides.iter().zip(&r2.sides).zip(&theta.lengthscales) {
        k *= unit_avg_1d(*a, *b, l);
        if k == 0.0 {
            break;
        }
    }
    k
}

/// Standard normal density.
pub(crate) fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal distribution function.
pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}
