//! Local-variance prior families for `lambda_i^2` and global schedules for `tau_n^2`.
//!
//! Parameterizations:
//!
//! | family                     | density on `x > 0`                                   |
//! |----------------------------|------------------------------------------------------|
//! | `gamma(shape, rate)`       | `r^s x^(s-1) e^(-r x) / Gamma(s)`                     |
//! | `inverse_gamma(shape, scale)` | `d^s x^(-s-1) e^(-d/x) / Gamma(s)`                 |
//! | `inverse_gaussian(mean, shape)` | `sqrt(l / (2 pi x^3)) exp(-l (x - m)^2 / (2 m^2 x))` |
//! | `beta_prime(a, b)`         | `x^(a-1) (1 + x)^(-a-b) / B(a, b)`                    |
//! | `point_mass(v)`            | degenerate at `v`                                    |

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Gamma, InverseGaussian};
use serde::{Deserialize, Serialize};
use statrs::function::beta::{beta_reg, ln_beta};
use statrs::function::erf::erfc;
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

use crate::error::{Result, RvmError};
use crate::quadrature::{integrate_log, integrate_positive, QuadOptions};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LocalVariancePrior {
    Gamma { shape: f64, rate: f64 },
    InverseGamma { shape: f64, scale: f64 },
    InverseGaussian { mean: f64, shape: f64 },
    BetaPrime { a: f64, b: f64 },
    PointMass { value: f64 },
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn ln_std_normal_cdf(z: f64) -> f64 {
    (0.5 * erfc(-z / std::f64::consts::SQRT_2)).ln()
}

impl LocalVariancePrior {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Gamma { .. } => "gamma",
            Self::InverseGamma { .. } => "inverse_gamma",
            Self::InverseGaussian { .. } => "inverse_gaussian",
            Self::BetaPrime { .. } => "beta_prime",
            Self::PointMass { .. } => "point_mass",
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match *self {
            Self::Gamma { shape, rate } => vec![shape, rate],
            Self::InverseGamma { shape, scale } => vec![shape, scale],
            Self::InverseGaussian { mean, shape } => vec![mean, shape],
            Self::BetaPrime { a, b } => vec![a, b],
            Self::PointMass { value } => vec![value],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(bad) = self.params().into_iter().find(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(RvmError::InvalidParameter(format!(
                "{} parameters must be positive and finite, got {bad}",
                self.name()
            )));
        }
        Ok(())
    }

    pub fn is_point_mass(&self) -> bool {
        matches!(self, Self::PointMass { .. })
    }

    fn check_domain(&self, x: f64) -> Result<()> {
        if !(x > 0.0) || x.is_nan() {
            return Err(RvmError::InvalidInput(format!("lambda^2 must be positive, got {x}")));
        }
        if self.is_point_mass() {
            return Err(RvmError::Unsupported("point_mass has no density".into()));
        }
        Ok(())
    }

    /// `ln pi(x)`; errors for `x <= 0` and for the point mass.
    pub fn ln_density(&self, x: f64) -> Result<f64> {
        self.check_domain(x)?;
        Ok(self.ln_density_unchecked(x))
    }

    pub fn density(&self, x: f64) -> Result<f64> {
        self.ln_density(x).map(f64::exp)
    }

    pub(crate) fn ln_density_unchecked(&self, x: f64) -> f64 {
        match *self {
            Self::Gamma { shape, rate } => {
                shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
            }
            Self::InverseGamma { shape, scale } => {
                shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x
            }
            Self::InverseGaussian { mean, shape } => {
                0.5 * (shape.ln() - (2.0 * std::f64::consts::PI).ln() - 3.0 * x.ln())
                    - shape * (x - mean).powi(2) / (2.0 * mean * mean * x)
            }
            Self::BetaPrime { a, b } => (a - 1.0) * x.ln() - (a + b) * x.ln_1p() - ln_beta(a, b),
            Self::PointMass { .. } => f64::NAN,
        }
    }

    /// `P(lambda^2 <= x)`.
    pub fn cdf(&self, x: f64) -> f64 {
        if let Self::PointMass { value } = *self {
            return if x >= value { 1.0 } else { 0.0 };
        }
        if x <= 0.0 {
            return 0.0;
        }
        if x == f64::INFINITY {
            return 1.0;
        }
        match *self {
            Self::Gamma { shape, rate } => gamma_lr(shape, rate * x),
            Self::InverseGamma { shape, scale } => gamma_ur(shape, scale / x),
            Self::InverseGaussian { mean, shape } => {
                let r = (shape / x).sqrt();
                let first = std_normal_cdf(r * (x / mean - 1.0));
                let second = (2.0 * shape / mean + ln_std_normal_cdf(-r * (x / mean + 1.0))).exp();
                (first + second).min(1.0)
            }
            Self::BetaPrime { a, b } => beta_reg(a, b, x / (1.0 + x)),
            Self::PointMass { .. } => unreachable!(),
        }
    }

    /// Inverse CDF by bisection in `ln x`.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(RvmError::InvalidInput(format!("quantile level must be in (0, 1), got {p}")));
        }
        if let Self::PointMass { value } = *self {
            return Ok(value);
        }
        let (mut lo, mut hi) = (-1.0f64, 1.0f64);
        while self.cdf(lo.exp()) > p {
            lo *= 2.0;
            if lo < -1400.0 {
                return Err(RvmError::Numerical(format!("{self}: lower quantile {p} out of range")));
            }
        }
        while self.cdf(hi.exp()) < p {
            hi *= 2.0;
            if hi > 1400.0 {
                return Err(RvmError::Numerical(format!("{self}: upper quantile {p} out of range")));
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid == lo || mid == hi {
                break;
            }
            if self.cdf(mid.exp()) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok((0.5 * (lo + hi)).exp())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Self::Gamma { shape, rate } => gamma_draw(shape, 1.0 / rate, rng),
            Self::InverseGamma { shape, scale } => scale / gamma_draw(shape, 1.0, rng),
            Self::InverseGaussian { mean, shape } => InverseGaussian::new(mean, shape)
                .expect("validated inverse Gaussian parameters")
                .sample(rng),
            Self::BetaPrime { a, b } => gamma_draw(a, 1.0, rng) / gamma_draw(b, 1.0, rng),
            Self::PointMass { value } => value,
        }
    }

    /// Whether `E[(lambda^2)^m]` is finite.
    pub fn moment_finite(&self, m: f64) -> bool {
        match *self {
            Self::Gamma { shape, .. } => m >= 0.0 || shape + m > 0.0,
            Self::InverseGamma { shape, .. } => m <= 0.0 || shape > m,
            Self::InverseGaussian { .. } | Self::PointMass { .. } => true,
            Self::BetaPrime { a, b } => (m <= 0.0 || b > m) && (m >= 0.0 || a + m > 0.0),
        }
    }

    /// `E[(lambda^2)^m]`, or `None` when it diverges.
    pub fn moment(&self, m: f64) -> Result<Option<f64>> {
        if !self.moment_finite(m) {
            return Ok(None);
        }
        let v = match *self {
            Self::Gamma { shape, rate } => (ln_gamma(shape + m) - ln_gamma(shape) - m * rate.ln()).exp(),
            Self::InverseGamma { shape, scale } => {
                (m * scale.ln() + ln_gamma(shape - m) - ln_gamma(shape)).exp()
            }
            Self::BetaPrime { a, b } => (ln_beta(a + m, b - m) - ln_beta(a, b)).exp(),
            Self::PointMass { value } => value.powf(m),
            Self::InverseGaussian { mean, shape } => {
                if m == 0.0 {
                    1.0
                } else if m == 1.0 {
                    mean
                } else if m == 2.0 {
                    mean * mean + mean.powi(3) / shape
                } else if m == -1.0 {
                    1.0 / mean + 1.0 / shape
                } else {
                    let p = *self;
                    integrate_positive(
                        |x| (m * x.ln() + p.ln_density_unchecked(x)).exp(),
                        QuadOptions::default(),
                    )?
                    .value
                }
            }
        };
        Ok(Some(v))
    }

    pub fn classify_moments(&self, delta: Option<f64>) -> MomentReport {
        let delta = delta.unwrap_or(DEFAULT_DELTA);
        MomentReport {
            prior: *self,
            delta,
            fourth_moment_finite: self.moment_finite(2.0),
            inverse_second_finite: self.moment_finite(-1.0),
            one_plus_delta_finite: self.moment_finite(1.0 + delta),
            numeric_estimates: None,
        }
    }

    /// As [`classify_moments`](Self::classify_moments), with Monte-Carlo estimates of the
    /// finite moments from `draws` prior samples.
    pub fn classify_moments_with_estimates<R: Rng + ?Sized>(
        &self,
        delta: Option<f64>,
        draws: usize,
        rng: &mut R,
    ) -> MomentReport {
        let mut report = self.classify_moments(delta);
        let xs: Vec<f64> = (0..draws).map(|_| self.sample(rng)).collect();
        let est = |finite: bool, m: f64| -> Option<f64> {
            finite.then(|| xs.iter().map(|x| x.powf(m)).sum::<f64>() / xs.len() as f64)
        };
        report.numeric_estimates = Some(MomentEstimates {
            draws,
            fourth: est(report.fourth_moment_finite, 2.0),
            inverse_second: est(report.inverse_second_finite, -1.0),
            one_plus_delta: est(report.one_plus_delta_finite, 1.0 + report.delta),
        });
        report
    }
}

/// Number of bands each tail is split into by [`LocalVariancePrior::divergence_scan`].
pub const SCAN_BANDS: usize = 4;
/// Each band spans this many decades of `lambda^2`.
pub const SCAN_BAND_DECADES: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceScan {
    pub m: f64,
    /// Band integrals of `x^m pi(x)` walking down from the median, nearest band first.
    pub lower_bands: Vec<f64>,
    /// Band integrals walking up from the median, nearest band first.
    pub upper_bands: Vec<f64>,
    pub finite: bool,
}

/// A tail diverges when its outermost band integral fails to decay against the one before.
fn tail_diverges(bands: &[f64]) -> bool {
    let last = bands[bands.len() - 1];
    let prev = bands[bands.len() - 2];
    last > 0.0 && (prev <= 0.0 || last >= 0.5 * prev)
}

impl LocalVariancePrior {
    /// Numerical check of `E[(lambda^2)^m] < inf`: integrates `x^m pi(x)` over successive
    /// bands of `SCAN_BAND_DECADES` decades on either side of the median and watches the
    /// outermost bands for non-decay. Independent of the closed-form [`moment_finite`](Self::moment_finite).
    pub fn divergence_scan(&self, m: f64) -> Result<DivergenceScan> {
        self.validate()?;
        if self.is_point_mass() {
            return Err(RvmError::Unsupported("divergence scan needs a density; point mass has all moments".into()));
        }
        let median = self.quantile(0.5)?;
        let opts = QuadOptions { abs_tol: 1e-300, rel_tol: 1e-8, ..QuadOptions::default() };
        let f = |x: f64| (m * x.ln() + self.ln_density_unchecked(x)).exp();
        let width = 10f64.powf(SCAN_BAND_DECADES);
        let mut lower_bands = Vec::with_capacity(SCAN_BANDS);
        let mut upper_bands = Vec::with_capacity(SCAN_BANDS);
        for k in 0..SCAN_BANDS {
            let near = width.powi(k as i32);
            upper_bands.push(integrate_log(f, median * near, median * near * width, opts)?.value);
            lower_bands.push(integrate_log(f, median / (near * width), median / near, opts)?.value);
        }
        let finite = !tail_diverges(&lower_bands) && !tail_diverges(&upper_bands);
        Ok(DivergenceScan { m, lower_bands, upper_bands, finite })
    }
}

fn gamma_draw<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> f64 {
    Gamma::new(shape, scale).expect("validated gamma parameters").sample(rng)
}

/// Default `delta` in the `(1 + delta)`-th moment condition; 1 recovers the fourth moment of `lambda`.
pub const DEFAULT_DELTA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimates {
    pub draws: usize,
    pub fourth: Option<f64>,
    pub inverse_second: Option<f64>,
    pub one_plus_delta: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub prior: LocalVariancePrior,
    pub delta: f64,
    /// `E[(lambda^2)^2] < inf`.
    pub fourth_moment_finite: bool,
    /// `E[(lambda^2)^-1] < inf`.
    pub inverse_second_finite: bool,
    /// `E[(lambda^2)^(1 + delta)] < inf`.
    pub one_plus_delta_finite: bool,
    pub numeric_estimates: Option<MomentEstimates>,
}

impl fmt::Display for LocalVariancePrior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let params: Vec<String> = self.params().iter().map(|v| format!("{v:?}")).collect();
        write!(f, "{}({})", self.name(), params.join(", "))
    }
}

impl FromStr for LocalVariancePrior {
    type Err = RvmError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || RvmError::InvalidParameter(format!("cannot parse prior {s:?}; expected family(p1, p2)"));
        let s = s.trim();
        let open = s.find('(').ok_or_else(bad)?;
        let body = s[open + 1..].strip_suffix(')').ok_or_else(bad)?;
        let name = s[..open].trim();
        let args: Vec<f64> = body
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        let want = if name == "point_mass" { 1 } else { 2 };
        if args.len() != want {
            return Err(RvmError::InvalidParameter(format!(
                "{name} takes {want} parameter(s), got {}",
                args.len()
            )));
        }
        let prior = match name {
            "gamma" => Self::Gamma { shape: args[0], rate: args[1] },
            "inverse_gamma" => Self::InverseGamma { shape: args[0], scale: args[1] },
            "inverse_gaussian" => Self::InverseGaussian { mean: args[0], shape: args[1] },
            "beta_prime" => Self::BetaPrime { a: args[0], b: args[1] },
            "point_mass" => Self::PointMass { value: args[0] },
            other => {
                return Err(RvmError::InvalidParameter(format!(
                    "unknown prior family {other:?}; expected gamma, inverse_gamma, inverse_gaussian, beta_prime or point_mass"
                )))
            }
        };
        prior.validate()?;
        Ok(prior)
    }
}

impl Serialize for LocalVariancePrior {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LocalVariancePrior {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    BoundedKernel,
    PolynomialContraction,
    PolynomialConsistency,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::BoundedKernel => "bounded_kernel",
            Self::PolynomialContraction => "polynomial_contraction",
            Self::PolynomialConsistency => "polynomial_consistency",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalSchedule {
    pub regime: Regime,
    #[serde(default = "unit")]
    pub constant: f64,
    /// Weakened-moment variant `tau^2 = c q n^(-1 - 1/(1 + delta))` for the
    /// bounded and polynomial-contraction regimes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
}

fn unit() -> f64 {
    1.0
}

impl GlobalSchedule {
    pub fn new(regime: Regime) -> Self {
        Self { regime, constant: 1.0, delta: None }
    }

    pub fn with_constant(mut self, c: f64) -> Self {
        self.constant = c;
        self
    }

    pub fn tau_squared(&self, n: usize, q_n: usize, t1: Option<f64>) -> Result<f64> {
        if n == 0 || q_n == 0 || q_n > n {
            return Err(RvmError::InvalidInput(format!("need 1 <= q_n <= n, got q_n={q_n}, n={n}")));
        }
        if !(self.constant > 0.0 && self.constant.is_finite()) {
            return Err(RvmError::InvalidParameter(format!("schedule constant must be positive, got {}", self.constant)));
        }
        let (n, q) = (n as f64, q_n as f64);
        let c = self.constant;
        match self.regime {
            Regime::BoundedKernel | Regime::PolynomialContraction => {
                let exponent = match self.delta {
                    None => -1.5,
                    Some(d) if d > 0.0 => -1.0 - 1.0 / (1.0 + d),
                    Some(d) => {
                        return Err(RvmError::InvalidParameter(format!("delta must be positive, got {d}")))
                    }
                };
                Ok(c * q * n.powf(exponent))
            }
            Regime::PolynomialConsistency => {
                let t1 = t1.ok_or_else(|| {
                    RvmError::InvalidInput("polynomial_consistency schedule needs t1(n)".into())
                })?;
                if !(t1 > 0.0) {
                    return Err(RvmError::InvalidInput(format!("t1 must be positive, got {t1}")));
                }
                Ok(c * (q / (t1 * t1) * n.powf(-1.5)).sqrt())
            }
        }
    }
}
