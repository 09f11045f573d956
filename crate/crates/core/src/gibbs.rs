//! Conditional posteriors and the blocked Gibbs sampler for
//!
//! ```text
//! Y | beta, sigma^2        ~ N(K beta, sigma^2 I)
//! beta | sigma^2, Lambda   ~ N(0, sigma^2 tau^2 Lambda^2)
//! sigma^2                  ~ IG(a/2, b/2)
//! lambda_i^2               ~ pi  (i.i.d.)
//! ```
//!
//! With `A = K^2 + tau^-2 Lambda^-2` the conditionals are
//!
//! ```text
//! beta | sigma^2, Lambda, Y ~ N(A^-1 K Y, sigma^2 A^-1)
//! sigma^2 | Lambda, Y       ~ IG((n + a)/2, (b + Y'Y - (KY)' A^-1 KY)/2)
//! sigma^2 | beta, Lambda, Y ~ IG(n + a/2, (b + beta' tau^-2 Lambda^-2 beta + |Y - K beta|^2)/2)
//! lambda_i^2 | beta, sigma^2 ∝ pi(l) l^(-1/2) exp(-beta_i^2 / (2 sigma^2 tau^2 l))
//! ```

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{ess, mc_se, split_rhat};
use crate::error::{Result, RvmError};
use crate::gig::sample_gig;
use crate::linalg::SpdFactor;
use crate::prior::LocalVariancePrior;
use crate::rng::{derive_seed, label, stream};
use crate::slice::slice_step;

/// Tolerance below zero accepted for `Y'Y - (KY)' A^-1 KY`, relative to `max(1, Y'Y)`.
pub const QUAD_FORM_TOLERANCE: f64 = 1e-9;

/// Initial slice width on the `ln lambda^2` scale.
pub const SLICE_WIDTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    pub a: f64,
    pub b: f64,
    pub tau_sq: f64,
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("a", self.a), ("b", self.b), ("tau_sq", self.tau_sq)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(RvmError::InvalidParameter(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }
}

/// Data-dependent quantities shared by every sweep.
#[derive(Clone, Debug)]
pub struct Problem {
    k: DMatrix<f64>,
    k2: DMatrix<f64>,
    y: DVector<f64>,
    ky: DVector<f64>,
    yty: f64,
}

impl Problem {
    /// `k` must be symmetric to within `1e-12` of its largest entry; it is symmetrized exactly.
    pub fn new(k: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let n = y.len();
        if n == 0 || k.nrows() != n || k.ncols() != n {
            return Err(RvmError::InvalidInput(format!(
                "kernel is {}x{} but Y has length {n}",
                k.nrows(),
                k.ncols()
            )));
        }
        if k.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(RvmError::InvalidInput("kernel or response has non-finite entries".into()));
        }
        let asym = (&k - k.transpose()).amax();
        if asym > 1e-12 * k.amax().max(f64::MIN_POSITIVE) {
            return Err(RvmError::InvalidInput(format!("kernel is not symmetric (max |K - K'| = {asym:.3e})")));
        }
        let k = (&k + k.transpose()) * 0.5;
        let k2 = &k * &k;
        let k2 = (&k2 + k2.transpose()) * 0.5;
        let ky = &k * &y;
        let yty = y.dot(&y);
        Ok(Self { k, k2, y, ky, yty })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn k(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }
}

/// `beta | sigma^2, Lambda, Y`: the mean and the factorization of `A`.
#[derive(Clone, Debug)]
pub struct BetaConditional {
    pub mean: DVector<f64>,
    factor: SpdFactor,
    /// Diagonal of `A - K^2`, i.e. `1 / (tau^2 lambda_i^2)` plus any jitter.
    shrink_diag: DVector<f64>,
}

impl BetaConditional {
    pub fn factor(&self) -> &SpdFactor {
        &self.factor
    }

    /// Dense `sigma^2 A^-1`.
    pub fn covariance(&self, sigma_sq: f64) -> DMatrix<f64> {
        let n = self.mean.len();
        let mut cov = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            cov.set_column(j, &(self.factor.solve(&e) * sigma_sq));
        }
        cov
    }

    /// `(tr(K A^-1 K), tr(A^-1))`, using `K A^-1 K` having the trace of `A^-1 K^2 = I - A^-1 D`.
    pub fn traces(&self) -> (f64, f64) {
        let inv_diag = self.factor.inverse_diagonal();
        let n = inv_diag.len() as f64;
        let kak = n - inv_diag.dot(&self.shrink_diag);
        (kak.max(0.0), inv_diag.sum())
    }
}

pub fn beta_conditional(problem: &Problem, lambda_sq: &DVector<f64>, tau_sq: f64) -> Result<BetaConditional> {
    let n = problem.n();
    if lambda_sq.len() != n {
        return Err(RvmError::InvalidInput(format!("lambda^2 has length {}, expected {n}", lambda_sq.len())));
    }
    let mut shrink_diag = DVector::zeros(n);
    for i in 0..n {
        let l = lambda_sq[i];
        let d = 1.0 / (tau_sq * l);
        if !(l > 0.0 && d.is_finite()) {
            return Err(RvmError::Numerical(format!(
                "lambda^2[{i}] = {l:e} with tau^2 = {tau_sq:e} gives a non-finite precision"
            )));
        }
        shrink_diag[i] = d;
    }
    let mut a = problem.k2.clone();
    for i in 0..n {
        a[(i, i)] += shrink_diag[i];
    }
    let factor = SpdFactor::new(a)?;
    if factor.jitter > 0.0 {
        shrink_diag.add_scalar_mut(factor.jitter);
    }
    let mean = factor.solve(&problem.ky);
    Ok(BetaConditional { mean, factor, shrink_diag })
}

/// Exact draw `m + sigma L^-T z`.
pub fn draw_beta<R: Rng + ?Sized>(cond: &BetaConditional, sigma_sq: f64, rng: &mut R) -> DVector<f64> {
    let n = cond.mean.len();
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    &cond.mean + cond.factor.solve_upper_transpose(&z) * sigma_sq.sqrt()
}

/// Inverse gamma with density `s^k / Gamma(k) x^(-k-1) e^(-s/x)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverseGammaParams {
    pub shape: f64,
    pub scale: f64,
}

impl InverseGammaParams {
    pub fn mean(&self) -> Option<f64> {
        (self.shape > 1.0).then(|| self.scale / (self.shape - 1.0))
    }

    pub fn ln_density(&self, x: f64) -> f64 {
        self.shape * self.scale.ln() - statrs::function::gamma::ln_gamma(self.shape)
            - (self.shape + 1.0) * x.ln()
            - self.scale / x
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.scale / Gamma::new(self.shape, 1.0).expect("positive shape").sample(rng)
    }
}

pub fn sigma_sq_conditional_given_beta(
    problem: &Problem,
    beta: &DVector<f64>,
    lambda_sq: &DVector<f64>,
    tau_sq: f64,
    hyper: &Hyperparams,
) -> InverseGammaParams {
    let n = problem.n() as f64;
    let penalty: f64 = beta.iter().zip(lambda_sq.iter()).map(|(b, l)| b * b / (tau_sq * l)).sum();
    let resid = (&problem.y - &problem.k * beta).norm_squared();
    InverseGammaParams { shape: n + hyper.a / 2.0, scale: (hyper.b + penalty + resid) / 2.0 }
}

/// `sigma^2 | Lambda, Y` with the quadratic form `Q = Y'(I - K A^-1 K)Y`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaMarginal {
    pub params: InverseGammaParams,
    pub quad_form: f64,
    n: usize,
    a: f64,
}

impl SigmaMarginal {
    /// `E(sigma^2 | Lambda, Y) = (b + Q) / (n + a - 2)`; requires `n + a > 2`.
    pub fn posterior_mean(&self) -> Result<f64> {
        let denom = self.n as f64 + self.a - 2.0;
        if denom <= 0.0 {
            return Err(RvmError::InvalidParameter(format!("E(sigma^2 | Lambda, Y) needs n + a > 2, got {}", denom + 2.0)));
        }
        Ok(2.0 * self.params.scale / denom)
    }
}

fn sigma_marginal_from(problem: &Problem, cond: &BetaConditional, hyper: &Hyperparams) -> Result<SigmaMarginal> {
    let n = problem.n();
    let q = problem.yty - problem.ky.dot(&cond.mean);
    if q < -QUAD_FORM_TOLERANCE * problem.yty.max(1.0) {
        return Err(RvmError::Numerical(format!(
            "quadratic form Y'(I - K A^-1 K)Y = {q:.6e} is negative (Y'Y = {:.6e})",
            problem.yty
        )));
    }
    let q = q.max(0.0);
    Ok(SigmaMarginal {
        params: InverseGammaParams { shape: (n as f64 + hyper.a) / 2.0, scale: (hyper.b + q) / 2.0 },
        quad_form: q,
        n,
        a: hyper.a,
    })
}

pub fn sigma_sq_marginal_conditional(
    problem: &Problem,
    lambda_sq: &DVector<f64>,
    tau_sq: f64,
    hyper: &Hyperparams,
) -> Result<SigmaMarginal> {
    let cond = beta_conditional(problem, lambda_sq, tau_sq)?;
    sigma_marginal_from(problem, &cond, hyper)
}

/// Draws `lambda_i^2` from its full conditional; `current` seeds the slice sampler.
pub fn lambda_sq_conditional<R: Rng + ?Sized>(
    prior: &LocalVariancePrior,
    beta_i: f64,
    sigma_sq: f64,
    tau_sq: f64,
    current: f64,
    rng: &mut R,
) -> Result<f64> {
    let c = beta_i * beta_i / (2.0 * sigma_sq * tau_sq);
    let draw = match *prior {
        LocalVariancePrior::PointMass { value } => value,
        LocalVariancePrior::InverseGamma { shape, scale } => {
            InverseGammaParams { shape: shape + 0.5, scale: scale + c }.sample(rng)
        }
        LocalVariancePrior::Gamma { shape, rate } => sample_gig(shape - 0.5, 2.0 * rate, 2.0 * c, rng)?,
        _ => {
            if !(current > 0.0 && current.is_finite()) {
                return Err(RvmError::Numerical(format!("slice sampler started at lambda^2 = {current}")));
            }
            let logf = |u: f64| {
                let x = u.exp();
                if x == 0.0 || !x.is_finite() {
                    return f64::NEG_INFINITY;
                }
                prior.ln_density_unchecked(x) + 0.5 * u - c / x
            };
            let u = slice_step(current.ln(), logf, SLICE_WIDTH, rng).map_err(|e| {
                RvmError::Numerical(format!(
                    "{e}; state: prior={prior}, beta_i={beta_i:e}, sigma^2={sigma_sq:e}, tau^2={tau_sq:e}, lambda^2={current:e}"
                ))
            })?;
            u.exp()
        }
    };
    if draw > 0.0 && draw.is_finite() {
        Ok(draw)
    } else {
        Err(RvmError::Numerical(format!(
            "lambda^2 draw {draw} not positive and finite (prior={prior}, beta_i={beta_i:e}, sigma^2={sigma_sq:e})"
        )))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    /// `(sigma^2, beta)` jointly given `Lambda` (marginal then conditional), then `Lambda`.
    Blocked,
    /// `beta | sigma^2, Lambda`, then `sigma^2 | beta, Lambda`, then `Lambda`.
    ThreeBlock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainConfig {
    /// Total iterations per chain, burn-in included.
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub chains: usize,
    pub seed: u64,
    /// Conditional traces `tr(K A^-1 K)` are evaluated on every `trace_every`-th retained draw.
    pub trace_every: usize,
    pub keep_trace: bool,
    /// Trace dumps include beta columns only up to this dimension.
    pub trace_beta_max: usize,
    pub sweep: Sweep,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            n_iter: 5000,
            burn_in: 1000,
            thin: 1,
            chains: 2,
            seed: 0,
            trace_every: 1,
            keep_trace: false,
            trace_beta_max: 50,
            sweep: Sweep::Blocked,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iter <= self.burn_in {
            return Err(RvmError::InvalidParameter(format!(
                "n_iter ({}) must exceed burn_in ({})",
                self.n_iter, self.burn_in
            )));
        }
        if self.thin == 0 || self.chains == 0 || self.trace_every == 0 {
            return Err(RvmError::InvalidParameter("thin, chains and trace_every must be >= 1".into()));
        }
        Ok(())
    }

    pub fn kept_per_chain(&self) -> usize {
        (self.n_iter - self.burn_in).div_ceil(self.thin)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    /// Distances `|K beta - r|^2`.
    KBeta,
    /// Distances `|beta - r|^2`.
    Beta,
}

/// Posterior tail probabilities `P(|v - reference|^2 >= t | Y)` for each threshold `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct TailQuery {
    pub space: Space,
    pub reference: DVector<f64>,
    pub thresholds: Vec<f64>,
}

/// Raw per-chain series from one run.
#[derive(Clone, Debug)]
pub struct ChainRecord {
    pub chain: usize,
    pub seed: u64,
    pub iterations: Vec<usize>,
    pub sigma_sq: Vec<f64>,
    pub sum_log_lambda_sq: Vec<f64>,
    /// Per coordinate, the Rao-Blackwell series `(K A^-1 K Y)_j` and `(A^-1 K Y)_j`.
    pub rb_kbeta: Vec<Vec<f64>>,
    pub rb_beta: Vec<Vec<f64>>,
    /// Per coordinate, the raw beta draws.
    pub beta: Vec<Vec<f64>>,
    /// `E(sigma^2 | Lambda, Y) tr(K A^-1 K)` and `E(sigma^2 | Lambda, Y) tr(A^-1)` on trace draws.
    pub cond_trace_kbeta: Vec<f64>,
    pub cond_trace_beta: Vec<f64>,
    /// Per tail query, squared distances of the raw draws.
    pub tail_dist: Vec<Vec<f64>>,
    pub kbeta_norm_sq: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailEstimate {
    pub space: Space,
    pub threshold: f64,
    pub prob: f64,
    pub se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonitorRhat {
    pub name: String,
    pub rhat: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub n: usize,
    pub prior: LocalVariancePrior,
    pub hyper: Hyperparams,
    pub chains: usize,
    pub n_kept: usize,
    pub trace_draws: usize,
    pub rb_mean_kbeta: Vec<f64>,
    pub rb_mean_kbeta_se: Vec<f64>,
    pub rb_mean_beta: Vec<f64>,
    pub rb_mean_beta_se: Vec<f64>,
    pub rb_sq_mean_kbeta: Vec<f64>,
    pub rb_sq_mean_beta: Vec<f64>,
    /// `E[E(sigma^2 | Lambda, Y) tr(K A^-1 K)]`, the within part of the total-variance split.
    pub cond_trace_kbeta: f64,
    pub cond_trace_kbeta_se: f64,
    pub cond_trace_beta: f64,
    pub cond_trace_beta_se: f64,
    pub trace_var_kbeta: f64,
    pub trace_var_beta: f64,
    pub sigma_sq_mean: f64,
    pub sigma_sq_mean_se: f64,
    pub beta_draw_mean: Vec<f64>,
    pub beta_draw_mean_se: Vec<f64>,
    pub beta_draw_sq_mean: Vec<f64>,
    pub beta_draw_sq_mean_se: Vec<f64>,
    pub tail: Vec<TailEstimate>,
    pub ess_min: f64,
    pub rhat: Vec<MonitorRhat>,
}

impl ChainSummary {
    pub fn rhat_max(&self) -> f64 {
        self.rhat.iter().map(|m| m.rhat).filter(|r| !r.is_nan()).fold(1.0, f64::max)
    }

    pub fn tail_prob(&self, space: Space, threshold: f64) -> Option<&TailEstimate> {
        self.tail.iter().find(|t| t.space == space && t.threshold == threshold)
    }

    fn recompute_traces(&mut self) {
        let var_part = |sq: &[f64], m: &[f64]| -> f64 {
            sq.iter().zip(m).map(|(s, v)| (s - v * v).max(0.0)).sum()
        };
        self.trace_var_kbeta = self.cond_trace_kbeta + var_part(&self.rb_sq_mean_kbeta, &self.rb_mean_kbeta);
        self.trace_var_beta = self.cond_trace_beta + var_part(&self.rb_sq_mean_beta, &self.rb_mean_beta);
    }

    /// Pools two summaries of the same problem as if their draws had been summarized together.
    /// R-hat monitors keep the worse value; `ess_min` adds (a lower bound for the pooled minimum).
    pub fn merge(&self, other: &ChainSummary) -> Result<ChainSummary> {
        if self.n != other.n || self.tail.len() != other.tail.len() {
            return Err(RvmError::InvalidInput("cannot merge summaries of different problems".into()));
        }
        let (k1, k2) = (self.n_kept as f64, other.n_kept as f64);
        let (w1, w2) = (k1 / (k1 + k2), k2 / (k1 + k2));
        let (t1, t2) = (self.trace_draws as f64, other.trace_draws as f64);
        let (v1, v2) = (t1 / (t1 + t2), t2 / (t1 + t2));
        let mean = |a: f64, b: f64, x: f64, y: f64| x * a + y * b;
        let se = |a: f64, b: f64, x: f64, y: f64| ((x * a).powi(2) + (y * b).powi(2)).sqrt();
        let vmean = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| mean(*p, *q, w1, w2)).collect::<Vec<_>>();
        let vse = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| se(*p, *q, w1, w2)).collect::<Vec<_>>();
        let mut tail = Vec::with_capacity(self.tail.len());
        for (a, b) in self.tail.iter().zip(&other.tail) {
            if a.space != b.space || a.threshold != b.threshold {
                return Err(RvmError::InvalidInput("tail queries differ between summaries".into()));
            }
            tail.push(TailEstimate {
                space: a.space,
                threshold: a.threshold,
                prob: mean(a.prob, b.prob, w1, w2),
                se: se(a.se, b.se, w1, w2),
            });
        }
        let mut rhat = self.rhat.clone();
        for m in &other.rhat {
            match rhat.iter_mut().find(|r| r.name == m.name) {
                Some(r) => r.rhat = r.rhat.max(m.rhat),
                None => rhat.push(m.clone()),
            }
        }
        let mut out = ChainSummary {
            n: self.n,
            prior: self.prior,
            hyper: self.hyper,
            chains: self.chains + other.chains,
            n_kept: self.n_kept + other.n_kept,
            trace_draws: self.trace_draws + other.trace_draws,
            rb_mean_kbeta: vmean(&self.rb_mean_kbeta, &other.rb_mean_kbeta),
            rb_mean_kbeta_se: vse(&self.rb_mean_kbeta_se, &other.rb_mean_kbeta_se),
            rb_mean_beta: vmean(&self.rb_mean_beta, &other.rb_mean_beta),
            rb_mean_beta_se: vse(&self.rb_mean_beta_se, &other.rb_mean_beta_se),
            rb_sq_mean_kbeta: vmean(&self.rb_sq_mean_kbeta, &other.rb_sq_mean_kbeta),
            rb_sq_mean_beta: vmean(&self.rb_sq_mean_beta, &other.rb_sq_mean_beta),
            cond_trace_kbeta: mean(self.cond_trace_kbeta, other.cond_trace_kbeta, v1, v2),
            cond_trace_kbeta_se: se(self.cond_trace_kbeta_se, other.cond_trace_kbeta_se, v1, v2),
            cond_trace_beta: mean(self.cond_trace_beta, other.cond_trace_beta, v1, v2),
            cond_trace_beta_se: se(self.cond_trace_beta_se, other.cond_trace_beta_se, v1, v2),
            trace_var_kbeta: 0.0,
            trace_var_beta: 0.0,
            sigma_sq_mean: mean(self.sigma_sq_mean, other.sigma_sq_mean, w1, w2),
            sigma_sq_mean_se: se(self.sigma_sq_mean_se, other.sigma_sq_mean_se, w1, w2),
            beta_draw_mean: vmean(&self.beta_draw_mean, &other.beta_draw_mean),
            beta_draw_mean_se: vse(&self.beta_draw_mean_se, &other.beta_draw_mean_se),
            beta_draw_sq_mean: vmean(&self.beta_draw_sq_mean, &other.beta_draw_sq_mean),
            beta_draw_sq_mean_se: vse(&self.beta_draw_sq_mean_se, &other.beta_draw_sq_mean_se),
            tail,
            ess_min: self.ess_min + other.ess_min,
            rhat,
        };
        out.recompute_traces();
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Output of [`run_chains`]: the pooled summary and the per-chain raw series.
#[derive(Clone, Debug)]
pub struct ChainRun {
    pub summary: ChainSummary,
    pub records: Vec<ChainRecord>,
}

fn run_single(
    problem: &Problem,
    prior: &LocalVariancePrior,
    hyper: &Hyperparams,
    cfg: &ChainConfig,
    queries: &[TailQuery],
    chain: usize,
) -> Result<ChainRecord> {
    let n = problem.n();
    let tau_sq = hyper.tau_sq;
    let seed = derive_seed(cfg.seed, &[label::CHAIN, chain as u64]);
    let mut rng = stream(seed);
    let kept = cfg.kept_per_chain();
    let series = || vec![Vec::with_capacity(kept); n];
    let mut rec = ChainRecord {
        chain,
        seed,
        iterations: Vec::with_capacity(kept),
        sigma_sq: Vec::with_capacity(kept),
        sum_log_lambda_sq: Vec::with_capacity(kept),
        rb_kbeta: series(),
        rb_beta: series(),
        beta: series(),
        cond_trace_kbeta: Vec::new(),
        cond_trace_beta: Vec::new(),
        tail_dist: vec![Vec::with_capacity(kept); queries.len()],
        kbeta_norm_sq: Vec::with_capacity(kept),
    };

    let mut lambda_sq = DVector::from_fn(n, |_, _| prior.sample(&mut rng));
    let mut sigma_sq = 1.0;
    let mut beta;
    for iter in 0..cfg.n_iter {
        let at = |e: RvmError| RvmError::Iteration { iteration: iter, source: Box::new(e) };
        let cond = beta_conditional(problem, &lambda_sq, tau_sq).map_err(at)?;
        let sig = sigma_marginal_from(problem, &cond, hyper).map_err(at)?;
        match cfg.sweep {
            Sweep::Blocked => {
                sigma_sq = sig.params.sample(&mut rng);
                beta = draw_beta(&cond, sigma_sq, &mut rng);
            }
            Sweep::ThreeBlock => {
                beta = draw_beta(&cond, sigma_sq, &mut rng);
                sigma_sq = sigma_sq_conditional_given_beta(problem, &beta, &lambda_sq, tau_sq, hyper).sample(&mut rng);
            }
        }
        if !(sigma_sq > 0.0 && sigma_sq.is_finite()) {
            return Err(at(RvmError::Numerical(format!("sigma^2 draw {sigma_sq} not positive and finite"))));
        }

        let retained = iter >= cfg.burn_in && (iter - cfg.burn_in) % cfg.thin == 0;
        if retained {
            let idx = rec.iterations.len();
            rec.iterations.push(iter);
            rec.sigma_sq.push(sigma_sq);
            rec.sum_log_lambda_sq.push(lambda_sq.iter().map(|l| l.ln()).sum());
            let km = &problem.k * &cond.mean;
            let kb = &problem.k * &beta;
            for j in 0..n {
                rec.rb_kbeta[j].push(km[j]);
                rec.rb_beta[j].push(cond.mean[j]);
                rec.beta[j].push(beta[j]);
            }
            if idx % cfg.trace_every == 0 {
                let e_sigma = sig.posterior_mean().map_err(at)?;
                let (tr_kak, tr_ainv) = cond.traces();
                rec.cond_trace_kbeta.push(e_sigma * tr_kak);
                rec.cond_trace_beta.push(e_sigma * tr_ainv);
            }
            for (q, out) in queries.iter().zip(rec.tail_dist.iter_mut()) {
                let v = match q.space {
                    Space::KBeta => &kb,
                    Space::Beta => &beta,
                };
                out.push((v - &q.reference).norm_squared());
            }
            rec.kbeta_norm_sq.push(kb.norm_squared());
        }

        for i in 0..n {
            lambda_sq[i] =
                lambda_sq_conditional(prior, beta[i], sigma_sq, tau_sq, lambda_sq[i], &mut rng).map_err(at)?;
        }
    }
    Ok(rec)
}

struct Pooled {
    mean: f64,
    se: f64,
    ess: f64,
    degenerate: bool,
}

/// Pools per-chain series: weighted mean, combined standard error, summed ESS.
fn pool<'a, I: Iterator<Item = &'a [f64]>>(parts: I) -> Pooled {
    let parts: Vec<&[f64]> = parts.collect();
    let total: usize = parts.iter().map(|p| p.len()).sum();
    let mut mean = 0.0;
    let mut var = 0.0;
    let mut ess_sum = 0.0;
    let mut degenerate = true;
    for p in &parts {
        if p.is_empty() {
            continue;
        }
        let w = p.len() as f64 / total as f64;
        mean += w * p.iter().sum::<f64>() / p.len() as f64;
        var += (w * mc_se(p)).powi(2);
        let e = ess(p);
        ess_sum += e.ess;
        degenerate &= e.degenerate;
    }
    Pooled { mean, se: var.sqrt(), ess: ess_sum, degenerate }
}

fn summarize(
    records: &[ChainRecord],
    n: usize,
    prior: &LocalVariancePrior,
    hyper: &Hyperparams,
    queries: &[TailQuery],
) -> ChainSummary {
    let n_kept: usize = records.iter().map(|r| r.sigma_sq.len()).sum();
    let trace_draws: usize = records.iter().map(|r| r.cond_trace_kbeta.len()).sum();
    let mut ess_min = f64::INFINITY;
    let mut note_ess = |p: &Pooled| {
        if !p.degenerate {
            ess_min = ess_min.min(p.ess);
        }
    };

    let mut coord = |get: &dyn Fn(&ChainRecord) -> &Vec<Vec<f64>>, track: bool| {
        let mut means = Vec::with_capacity(n);
        let mut ses = Vec::with_capacity(n);
        let mut sq = Vec::with_capacity(n);
        let mut sq_se = Vec::with_capacity(n);
        for j in 0..n {
            let p = pool(records.iter().map(|r| get(r)[j].as_slice()));
            if track {
                note_ess(&p);
            }
            let squares: Vec<Vec<f64>> = records.iter().map(|r| get(r)[j].iter().map(|v| v * v).collect()).collect();
            let ps = pool(squares.iter().map(|s| s.as_slice()));
            means.push(p.mean);
            ses.push(p.se);
            sq.push(ps.mean);
            sq_se.push(ps.se);
        }
        (means, ses, sq, sq_se)
    };
    let (rb_mean_kbeta, rb_mean_kbeta_se, rb_sq_mean_kbeta, _) = coord(&|r| &r.rb_kbeta, true);
    let (rb_mean_beta, rb_mean_beta_se, rb_sq_mean_beta, _) = coord(&|r| &r.rb_beta, false);
    let (beta_draw_mean, beta_draw_mean_se, beta_draw_sq_mean, beta_draw_sq_mean_se) = coord(&|r| &r.beta, false);

    let sigma = pool(records.iter().map(|r| r.sigma_sq.as_slice()));
    note_ess(&sigma);
    let ctk = pool(records.iter().map(|r| r.cond_trace_kbeta.as_slice()));
    let ctb = pool(records.iter().map(|r| r.cond_trace_beta.as_slice()));

    let mut tail = Vec::new();
    for (qi, q) in queries.iter().enumerate() {
        for &t in &q.thresholds {
            let ind: Vec<Vec<f64>> = records
                .iter()
                .map(|r| r.tail_dist[qi].iter().map(|d| if *d >= t { 1.0 } else { 0.0 }).collect())
                .collect();
            let p = pool(ind.iter().map(|s| s.as_slice()));
            tail.push(TailEstimate { space: q.space, threshold: t, prob: p.mean.clamp(0.0, 1.0), se: p.se });
        }
    }

    let mut monitors: Vec<(String, Vec<&[f64]>)> = vec![
        ("sigma_sq".into(), records.iter().map(|r| r.sigma_sq.as_slice()).collect()),
        ("sum_log_lambda_sq".into(), records.iter().map(|r| r.sum_log_lambda_sq.as_slice()).collect()),
        ("kbeta_norm_sq".into(), records.iter().map(|r| r.kbeta_norm_sq.as_slice()).collect()),
    ];
    for (qi, q) in queries.iter().enumerate() {
        let name = match q.space {
            Space::KBeta => format!("tail_dist_kbeta_{qi}"),
            Space::Beta => format!("tail_dist_beta_{qi}"),
        };
        monitors.push((name, records.iter().map(|r| r.tail_dist[qi].as_slice()).collect()));
    }
    let rhat = monitors
        .into_iter()
        .map(|(name, chains)| {
            let p = pool(chains.iter().copied());
            note_ess(&p);
            MonitorRhat { name, rhat: split_rhat(&chains) }
        })
        .collect();

    let mut s = ChainSummary {
        n,
        prior: *prior,
        hyper: *hyper,
        chains: records.len(),
        n_kept,
        trace_draws,
        rb_mean_kbeta,
        rb_mean_kbeta_se,
        rb_mean_beta,
        rb_mean_beta_se,
        rb_sq_mean_kbeta,
        rb_sq_mean_beta,
        cond_trace_kbeta: ctk.mean,
        cond_trace_kbeta_se: ctk.se,
        cond_trace_beta: ctb.mean,
        cond_trace_beta_se: ctb.se,
        trace_var_kbeta: 0.0,
        trace_var_beta: 0.0,
        sigma_sq_mean: sigma.mean,
        sigma_sq_mean_se: sigma.se,
        beta_draw_mean,
        beta_draw_mean_se,
        beta_draw_sq_mean,
        beta_draw_sq_mean_se,
        tail,
        ess_min: if ess_min.is_finite() { ess_min } else { n_kept as f64 },
        rhat,
    };
    s.recompute_traces();
    s
}

fn validate_run(problem: &Problem, prior: &LocalVariancePrior, hyper: &Hyperparams, cfg: &ChainConfig, queries: &[TailQuery]) -> Result<()> {
    prior.validate()?;
    hyper.validate()?;
    cfg.validate()?;
    if problem.n() as f64 + hyper.a <= 2.0 {
        return Err(RvmError::InvalidParameter(format!(
            "need n + a > 2 for E(sigma^2 | Lambda, Y), got n={}, a={}",
            problem.n(),
            hyper.a
        )));
    }
    for q in queries {
        if q.reference.len() != problem.n() {
            return Err(RvmError::InvalidInput("tail reference has the wrong length".into()));
        }
        if q.thresholds.iter().any(|t| t.is_nan()) {
            return Err(RvmError::InvalidInput("tail threshold is NaN".into()));
        }
    }
    Ok(())
}

/// Runs `cfg.chains` independent chains (in parallel) and pools their summaries.
pub fn run_chains(
    problem: &Problem,
    prior: &LocalVariancePrior,
    hyper: &Hyperparams,
    cfg: &ChainConfig,
    queries: &[TailQuery],
) -> Result<ChainRun> {
    validate_run(problem, prior, hyper, cfg, queries)?;
    let records = (0..cfg.chains)
        .into_par_iter()
        .map(|c| run_single(problem, prior, hyper, cfg, queries, c))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&records, problem.n(), prior, hyper, queries);
    Ok(ChainRun { summary, records })
}

/// Sequential variant of [`run_chains`] for callers that already parallelize at a coarser level.
pub fn run_chains_sequential(
    problem: &Problem,
    prior: &LocalVariancePrior,
    hyper: &Hyperparams,
    cfg: &ChainConfig,
    queries: &[TailQuery],
) -> Result<ChainRun> {
    validate_run(problem, prior, hyper, cfg, queries)?;
    let records = (0..cfg.chains)
        .map(|c| run_single(problem, prior, hyper, cfg, queries, c))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&records, problem.n(), prior, hyper, queries);
    Ok(ChainRun { summary, records })
}

pub fn run_chain(
    problem: &Problem,
    prior: &LocalVariancePrior,
    hyper: &Hyperparams,
    cfg: &ChainConfig,
) -> Result<ChainSummary> {
    run_chains(problem, prior, hyper, cfg, &[]).map(|r| r.summary)
}

/// Summary of a single chain's record, for merging tests and incremental pooling.
pub fn summarize_record(
    record: &ChainRecord,
    prior: &LocalVariancePrior,
    hyper: &Hyperparams,
    queries: &[TailQuery],
) -> ChainSummary {
    summarize(std::slice::from_ref(record), record.rb_beta.len(), prior, hyper, queries)
}

/// One row per retained draw: `chain, iteration, sigma_sq[, beta_1..beta_n]`, beta columns
/// only when `n <= beta_max`.
pub fn write_trace_csv<W: Write>(w: W, records: &[ChainRecord], beta_max: usize) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let n = records.first().map_or(0, |r| r.beta.len());
    let with_beta = n <= beta_max;
    let mut header = vec!["chain".to_string(), "iteration".to_string(), "sigma_sq".to_string()];
    if with_beta {
        header.extend((1..=n).map(|j| format!("beta_{j}")));
    }
    out.write_record(&header)?;
    for r in records {
        for (k, iter) in r.iterations.iter().enumerate() {
            let mut row = vec![r.chain.to_string(), iter.to_string(), format!("{}", r.sigma_sq[k])];
            if with_beta {
                row.extend(r.beta.iter().map(|b| format!("{}", b[k])));
            }
            out.write_record(&row)?;
        }
    }
    out.flush()?;
    Ok(())
}
