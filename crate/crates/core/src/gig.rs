//! Generalized inverse Gaussian variates.
//!
//! `GIG(p, a, b)` has density proportional to `x^(p-1) exp(-(a x + b / x) / 2)` on `x > 0`.
//! Sampling follows Hörmann and Leydold (2014): the standardized two-parameter form
//! `x^(lambda-1) exp(-omega (x + 1/x) / 2)` is drawn with one of three rejection schemes
//! and rescaled by `sqrt(b / a)`.

use rand::distr::Open01;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Result, RvmError};

fn unif<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(Open01)
}

/// Mode of the standardized density.
fn mode(lambda: f64, omega: f64) -> f64 {
    if lambda >= 1.0 {
        (((lambda - 1.0).powi(2) + omega * omega).sqrt() + (lambda - 1.0)) / omega
    } else {
        omega / (((1.0 - lambda).powi(2) + omega * omega).sqrt() + (1.0 - lambda))
    }
}

/// Ratio-of-uniforms with mode shift; used for `lambda > 2` or `omega > 3`.
fn rou_shift<R: Rng + ?Sized>(lambda: f64, omega: f64, rng: &mut R) -> f64 {
    let t = 0.5 * (lambda - 1.0);
    let s = 0.25 * omega;
    let xm = mode(lambda, omega);
    let nc = t * xm.ln() - s * (xm + 1.0 / xm);

    // roots of the cubic bounding the shifted region
    let a = -(2.0 * (lambda + 1.0) / omega + xm);
    let b = 2.0 * (lambda - 1.0) * xm / omega - 1.0;
    let c = xm;
    let p = b - a * a / 3.0;
    let q = 2.0 * a * a * a / 27.0 - a * b / 3.0 + c;
    let fi = (-q / (2.0 * (-(p * p * p) / 27.0).sqrt())).acos();
    let fak = 2.0 * (-p / 3.0).sqrt();
    let y1 = fak * (fi / 3.0).cos() - a / 3.0;
    let y2 = fak * (fi / 3.0 + 4.0 / 3.0 * std::f64::consts::PI).cos() - a / 3.0;
    let uplus = (y1 - xm) * (t * y1.ln() - s * (y1 + 1.0 / y1) - nc).exp();
    let uminus = (y2 - xm) * (t * y2.ln() - s * (y2 + 1.0 / y2) - nc).exp();

    loop {
        let u = uminus + unif(rng) * (uplus - uminus);
        let v = unif(rng);
        let x = u / v + xm;
        if x > 0.0 && v.ln() <= t * x.ln() - s * (x + 1.0 / x) - nc {
            return x;
        }
    }
}

/// Ratio-of-uniforms without shift; used for `lambda >= 1 - 2.25 omega^2` or `omega > 0.2`.
fn rou_noshift<R: Rng + ?Sized>(lambda: f64, omega: f64, rng: &mut R) -> f64 {
    let t = 0.5 * (lambda - 1.0);
    let s = 0.25 * omega;
    let xm = mode(lambda, omega);
    let nc = t * xm.ln() - s * (xm + 1.0 / xm);
    let ym = ((lambda + 1.0) + ((lambda + 1.0).powi(2) + omega * omega).sqrt()) / omega;
    let um = (0.5 * (lambda + 1.0) * ym.ln() - s * (ym + 1.0 / ym) - nc).exp();
    loop {
        let u = um * unif(rng);
        let v = unif(rng);
        let x = u / v;
        if v.ln() <= t * x.ln() - s * (x + 1.0 / x) - nc {
            return x;
        }
    }
}

/// Three-piece hat (constant, power, exponential) for `0 <= lambda < 1`, small `omega`.
fn three_piece<R: Rng + ?Sized>(lambda: f64, omega: f64, rng: &mut R) -> f64 {
    let xm = mode(lambda, omega);
    let x0 = omega / (1.0 - lambda);
    let k0 = ((lambda - 1.0) * xm.ln() - 0.5 * omega * (xm + 1.0 / xm)).exp();
    let a0 = k0 * x0;
    let (k1, a1, k2, a2);
    if x0 >= 2.0 / omega {
        k1 = 0.0;
        a1 = 0.0;
        k2 = x0.powf(lambda - 1.0);
        a2 = k2 * 2.0 * (-omega * x0 / 2.0).exp() / omega;
    } else {
        k1 = (-omega).exp();
        a1 = if lambda == 0.0 {
            k1 * (2.0 / (omega * omega)).ln()
        } else {
            k1 / lambda * ((2.0 / omega).powf(lambda) - x0.powf(lambda))
        };
        k2 = (2.0 / omega).powf(lambda - 1.0);
        a2 = k2 * 2.0 * (-1.0f64).exp() / omega;
    }
    let total = a0 + a1 + a2;
    loop {
        let mut v = total * unif(rng);
        let (x, hx);
        if v <= a0 {
            x = x0 * v / a0;
            hx = k0;
        } else {
            v -= a0;
            if v <= a1 {
                if lambda == 0.0 {
                    x = omega * (omega.exp() * v).exp();
                    hx = k1 / x;
                } else {
                    x = (x0.powf(lambda) + lambda / k1 * v).powf(1.0 / lambda);
                    hx = k1 * x.powf(lambda - 1.0);
                }
            } else {
                v -= a1;
                let lo = x0.max(2.0 / omega);
                x = -2.0 / omega * ((-omega / 2.0 * lo).exp() - omega / (2.0 * k2) * v).ln();
                hx = k2 * (-omega / 2.0 * x).exp();
            }
        }
        let u = unif(rng) * hx;
        if u.ln() <= (lambda - 1.0) * x.ln() - omega / 2.0 * (x + 1.0 / x) {
            return x;
        }
    }
}

/// Draws from `GIG(p, a, b)` with `a > 0`, `b >= 0`; `b = 0` requires `p > 0` (gamma limit).
pub fn sample_gig<R: Rng + ?Sized>(p: f64, a: f64, b: f64, rng: &mut R) -> Result<f64> {
    if !(p.is_finite() && a > 0.0 && a.is_finite() && b >= 0.0 && b.is_finite()) {
        return Err(RvmError::InvalidParameter(format!(
            "GIG needs finite p, a > 0, b >= 0; got p={p}, a={a}, b={b}"
        )));
    }
    let omega = a.sqrt() * b.sqrt();
    if omega == 0.0 {
        if p > 0.0 {
            let g = Gamma::new(p, 2.0 / a).map_err(|e| RvmError::InvalidParameter(e.to_string()))?;
            return Ok(g.sample(rng));
        }
        return Err(RvmError::Numerical(format!(
            "GIG with b = {b} and p = {p} <= 0 is improper"
        )));
    }
    let alpha = b.sqrt() / a.sqrt();
    let lambda = p.abs();
    let x = if lambda > 2.0 || omega > 3.0 {
        rou_shift(lambda, omega, rng)
    } else if lambda >= 1.0 - 2.25 * omega * omega || omega > 0.2 {
        rou_noshift(lambda, omega, rng)
    } else {
        three_piece(lambda, omega, rng)
    };
    let out = if p < 0.0 { alpha / x } else { alpha * x };
    if out > 0.0 && out.is_finite() {
        Ok(out)
    } else {
        Err(RvmError::Numerical(format!(
            "GIG draw {out} not positive and finite (p={p}, a={a}, b={b})"
        )))
    }
}

/// Unnormalized log density of `GIG(p, a, b)`.
pub fn gig_ln_kernel(x: f64, p: f64, a: f64, b: f64) -> f64 {
    (p - 1.0) * x.ln() - 0.5 * (a * x + b / x)
}
