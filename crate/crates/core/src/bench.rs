//! Monte-Carlo contraction experiments over an `n`-grid.
//!
//! Each cell `(n, replicate)` draws a design, builds the kernel and its spectral
//! certificate, draws a sparse truth and a response, runs the sampler at the
//! scheduled `tau^2`, and records squared-error, trace-variance and tail metrics.
//! Cells whose certificate fails, whose chains do not mix (R-hat) or whose sampler
//! hits a numerical failure are kept as flagged rows and excluded from aggregates.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RvmError};
use crate::gibbs::{run_chains_sequential, ChainConfig, Hyperparams, Problem, Space, TailQuery};
use crate::kernel::{build_kernel, generate_design, spectral_certificate, DesignKind, KernelSpec};
use crate::prior::{GlobalSchedule, LocalVariancePrior, Regime};
use crate::rng::{child_stream, derive_seed, label};
use crate::stats::{mean_se, ols, LinearFit, MeanSe};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportRule {
    /// Uniform without replacement.
    Random,
    /// Indices `0..q_n`.
    First,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueRule {
    /// `+M, -M, +M, ...` along the support.
    Alternating,
    /// Uniform on `(-M, M)`, rejecting `|v| < M / 10`.
    Uniform,
    /// `M z` with `z` standard normal, rejecting `|v| < M / 10`; not bounded by `M`.
    Unbounded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrueModel {
    pub beta0: Vec<f64>,
    pub q_n: usize,
    pub m: f64,
    pub sigma0_sq: f64,
    pub support: Vec<usize>,
}

/// `q_n = ceil(n^gamma)`, guarded against `powf` landing a hair above an integer.
pub fn q_schedule(n: usize, gamma: f64) -> usize {
    let v = (n as f64).powf(gamma);
    let r = v.round();
    let q = if (v - r).abs() <= 1e-9 * r.max(1.0) { r } else { v.ceil() };
    (q as usize).min(n)
}

pub fn generate_truth<R: Rng + ?Sized>(
    n: usize,
    q_n: usize,
    m: f64,
    sigma0_sq: f64,
    support_rule: SupportRule,
    value_rule: ValueRule,
    rng: &mut R,
) -> Result<TrueModel> {
    if q_n > n {
        return Err(RvmError::InvalidInput(format!("q_n = {q_n} exceeds n = {n}")));
    }
    if !(m > 0.0) || !(sigma0_sq >= 0.0) {
        return Err(RvmError::InvalidParameter(format!("need M > 0 and sigma0^2 >= 0, got {m}, {sigma0_sq}")));
    }
    let mut support: Vec<usize> = match support_rule {
        SupportRule::First => (0..q_n).collect(),
        SupportRule::Random => sample_indices(rng, n, q_n).into_vec(),
    };
    support.sort_unstable();
    let mut beta0 = vec![0.0; n];
    for (k, &i) in support.iter().enumerate() {
        beta0[i] = match value_rule {
            ValueRule::Alternating => {
                if k % 2 == 0 {
                    m
                } else {
                    -m
                }
            }
            ValueRule::Uniform => loop {
                let v = m * (2.0 * rng.random::<f64>() - 1.0);
                if v.abs() >= m / 10.0 {
                    break v;
                }
            },
            ValueRule::Unbounded => loop {
                let v = m * rng.sample::<f64, _>(StandardNormal);
                if v.abs() >= m / 10.0 {
                    break v;
                }
            },
        };
    }
    Ok(TrueModel { beta0, q_n, m, sigma0_sq, support })
}

/// `Y = K beta0 + sigma0 z`.
pub fn simulate_data<R: Rng + ?Sized>(k: &nalgebra::DMatrix<f64>, truth: &TrueModel, rng: &mut R) -> Result<DVector<f64>> {
    let n = truth.beta0.len();
    if k.nrows() != n || k.ncols() != n {
        return Err(RvmError::InvalidInput(format!("kernel is {}x{}, truth has n = {n}", k.nrows(), k.ncols())));
    }
    let mean = k * DVector::from_column_slice(&truth.beta0);
    let sd = truth.sigma0_sq.sqrt();
    Ok(DVector::from_fn(n, |i, _| mean[i] + sd * rng.sample::<f64, _>(StandardNormal)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub regime: Regime,
    pub n_grid: Vec<usize>,
    pub gamma: f64,
    pub replicates: usize,
    pub seed: u64,
    pub prior: LocalVariancePrior,
    pub a: f64,
    pub b: f64,
    pub schedule_constant: f64,
    pub schedule_delta: Option<f64>,
    pub m: f64,
    pub sigma0_sq: f64,
    pub support_rule: SupportRule,
    pub value_rule: ValueRule,
    /// Kernel parameter; defaults to 1 for every regime.
    pub kernel_theta: Option<f64>,
    /// Covariate dimension; defaults per regime (10, 2n, or the consistency rule).
    pub p: Option<usize>,
    /// `K` is divided by `p^theta n^-scale_exponent` in the polynomial-contraction regime.
    pub scale_exponent: f64,
    /// Upper kernel-parameter bound used when perturbing near-orthogonal designs.
    pub a_u: f64,
    /// Fixed certificate bounds; by default `(0.5, 2)` for the bounded regime and
    /// `s (1 -/+ 1/n)` for polynomial regimes, with `s` the nominal kernel scale.
    pub certificate: Option<(f64, f64)>,
    pub rhat_limit: f64,
    pub chain: ChainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            regime: Regime::BoundedKernel,
            n_grid: vec![50, 100, 200, 400],
            gamma: 0.5,
            replicates: 16,
            seed: 20_240_601,
            prior: LocalVariancePrior::InverseGamma { shape: 3.0, scale: 1.0 },
            a: 1.0,
            b: 1.0,
            schedule_constant: 1.0,
            schedule_delta: None,
            m: 2.0,
            sigma0_sq: 1.0,
            support_rule: SupportRule::Random,
            value_rule: ValueRule::Uniform,
            kernel_theta: None,
            p: None,
            scale_exponent: 0.125,
            a_u: 2.0,
            certificate: None,
            rhat_limit: 1.05,
            chain: ChainConfig { n_iter: 1000, burn_in: 300, ..ChainConfig::default() },
        }
    }
}

/// Design, kernel and certificate bounds resolved for one `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSetup {
    pub n: usize,
    pub p: usize,
    pub q_n: usize,
    pub design: DesignKind,
    pub kernel: KernelSpec,
    pub c1: f64,
    pub c2: f64,
}

impl ExperimentConfig {
    pub fn for_regime(regime: Regime) -> Self {
        Self { regime, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_grid.is_empty() || self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(RvmError::InvalidParameter("n_grid must be non-empty and strictly increasing".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(RvmError::InvalidParameter(format!("gamma must be in (0, 1), got {}", self.gamma)));
        }
        if self.replicates < 1 {
            return Err(RvmError::InvalidParameter("replicates must be >= 1".into()));
        }
        self.prior.validate()?;
        self.chain.validate()?;
        if let Some(t) = self.kernel_theta {
            if !(t > 0.0) {
                return Err(RvmError::InvalidParameter(format!("kernel_theta must be positive, got {t}")));
            }
        }
        Ok(())
    }

    pub fn setup(&self, n: usize) -> Result<CellSetup> {
        let q_n = q_schedule(n, self.gamma);
        let theta = self.kernel_theta.unwrap_or(1.0);
        let nf = n as f64;
        let (p, design, kernel, nominal) = match self.regime {
            Regime::BoundedKernel => {
                let p = self.p.unwrap_or(10);
                (p, DesignKind::Separated { theta }, KernelSpec::gaussian(theta), 1.0)
            }
            Regime::PolynomialContraction => {
                let p = self.p.unwrap_or(2 * n);
                let scale = (p as f64).powf(theta) * nf.powf(-self.scale_exponent);
                let spec = KernelSpec::polynomial(theta).with_scale(scale);
                (p, DesignKind::PerturbedOrthogonal { a_u: self.a_u }, spec, nf.powf(self.scale_exponent))
            }
            Regime::PolynomialConsistency => {
                let p = self.p.unwrap_or_else(|| consistency_p(n, q_n, theta));
                let nominal = (p as f64).powf(theta);
                (p, DesignKind::PerturbedOrthogonal { a_u: self.a_u }, KernelSpec::polynomial(theta), nominal)
            }
        };
        let (c1, c2) = match (self.certificate, self.regime) {
            (Some(c), _) => c,
            (None, Regime::BoundedKernel) => (0.5, 2.0),
            (None, _) => (nominal * (1.0 - 1.0 / nf), nominal * (1.0 + 1.0 / nf)),
        };
        Ok(CellSetup { n, p, q_n, design, kernel, c1, c2 })
    }
}

/// `p = max(n + 1, ceil(4 (q_n n^1.5)^(1/(2 theta))))`.
pub fn consistency_p(n: usize, q_n: usize, theta: f64) -> usize {
    let v = 4.0 * (q_n as f64 * (n as f64).powf(1.5)).powf(1.0 / (2.0 * theta));
    (v.ceil() as usize).max(n + 1)
}

/// One `(n, replicate)` row of the long-format output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionRow {
    pub n: usize,
    pub replicate: usize,
    pub regime: String,
    pub p: usize,
    pub q_n: usize,
    pub seed: u64,
    pub tau_sq: Option<f64>,
    pub t1: Option<f64>,
    pub t2: Option<f64>,
    pub certificate_ok: bool,
    pub err_sq: Option<f64>,
    pub err_sq_se: Option<f64>,
    pub trace_var: Option<f64>,
    pub trace_var_se: Option<f64>,
    pub err_sq_beta: Option<f64>,
    pub trace_var_beta: Option<f64>,
    pub threshold_kbeta: f64,
    pub tail_prob_kbeta: Option<f64>,
    pub tail_prob_kbeta_se: Option<f64>,
    pub threshold_beta: Option<f64>,
    pub tail_prob_beta: Option<f64>,
    pub tail_prob_beta_se: Option<f64>,
    pub rhat_max: Option<f64>,
    pub ess_min: Option<f64>,
    pub markov_ok: Option<bool>,
    /// `;`-separated flags; empty for usable rows.
    pub flags: String,
}

impl ContractionRow {
    pub fn is_flagged(&self) -> bool {
        !self.flags.is_empty()
    }
}

/// `sqrt(q_n t1^-2 n^1.5)`.
pub fn consistency_threshold(n: usize, q_n: usize, t1: f64) -> f64 {
    (q_n as f64 / (t1 * t1) * (n as f64).powf(1.5)).sqrt()
}

/// `log(n / q_n) q_n`.
pub fn minimax_threshold(n: usize, q_n: usize) -> f64 {
    (n as f64 / q_n as f64).ln() * q_n as f64
}

pub fn run_cell(config: &ExperimentConfig, n: usize, replicate: usize) -> Result<ContractionRow> {
    let setup = config.setup(n)?;
    let cell_seed = derive_seed(config.seed, &[n as u64, replicate as u64]);
    let mut row = ContractionRow {
        n,
        replicate,
        regime: config.regime.as_str().to_string(),
        p: setup.p,
        q_n: setup.q_n,
        seed: cell_seed,
        tau_sq: None,
        t1: None,
        t2: None,
        certificate_ok: false,
        err_sq: None,
        err_sq_se: None,
        trace_var: None,
        trace_var_se: None,
        err_sq_beta: None,
        trace_var_beta: None,
        threshold_kbeta: minimax_threshold(n, setup.q_n),
        tail_prob_kbeta: None,
        tail_prob_kbeta_se: None,
        threshold_beta: None,
        tail_prob_beta: None,
        tail_prob_beta_se: None,
        rhat_max: None,
        ess_min: None,
        markov_ok: None,
        flags: String::new(),
    };

    let mut design_rng = child_stream(cell_seed, &[label::DESIGN]);
    let x = generate_design(n, setup.p, setup.design, &mut design_rng)?;
    let kernel = build_kernel(&x, &setup.kernel)?;
    let cert = spectral_certificate(kernel.entries(), setup.c1, setup.c2)?;
    row.t1 = Some(cert.lambda_min);
    row.t2 = Some(cert.lambda_max);
    row.certificate_ok = cert.satisfied;
    if !cert.satisfied {
        row.flags = "certificate".into();
        return Ok(row);
    }

    let mut truth_rng = child_stream(cell_seed, &[label::TRUTH]);
    let truth = generate_truth(n, setup.q_n, config.m, config.sigma0_sq, config.support_rule, config.value_rule, &mut truth_rng)?;
    let mut noise_rng = child_stream(cell_seed, &[label::NOISE]);
    let k = kernel.into_entries();
    let y = simulate_data(&k, &truth, &mut noise_rng)?;

    let schedule = GlobalSchedule { regime: config.regime, constant: config.schedule_constant, delta: config.schedule_delta };
    let tau_sq = schedule.tau_squared(n, setup.q_n, Some(cert.lambda_min))?;
    row.tau_sq = Some(tau_sq);
    let hyper = Hyperparams { a: config.a, b: config.b, tau_sq };
    let beta0 = DVector::from_column_slice(&truth.beta0);
    let kbeta0 = &k * &beta0;
    let thr_beta = consistency_threshold(n, setup.q_n, cert.lambda_min);
    row.threshold_beta = Some(thr_beta);
    let queries = [
        TailQuery { space: Space::KBeta, reference: kbeta0.clone(), thresholds: vec![row.threshold_kbeta] },
        TailQuery { space: Space::Beta, reference: beta0.clone(), thresholds: vec![thr_beta] },
    ];
    let problem = Problem::new(k, y)?;
    let chain = ChainConfig { seed: derive_seed(cell_seed, &[label::CHAIN]), ..config.chain.clone() };
    let run = match run_chains_sequential(&problem, &config.prior, &hyper, &chain, &queries) {
        Ok(r) => r,
        Err(e) if e.is_numerical() => {
            row.flags = format!("numerical: {e}").replace([';', '\n', ','], " ");
            return Ok(row);
        }
        Err(e) => return Err(e),
    };
    let s = run.summary;

    let diff: Vec<f64> = s.rb_mean_kbeta.iter().zip(kbeta0.iter()).map(|(a, b)| a - b).collect();
    let err_sq: f64 = diff.iter().map(|d| d * d).sum();
    let err_sq_se = diff.iter().zip(&s.rb_mean_kbeta_se).map(|(d, se)| (2.0 * d * se).powi(2)).sum::<f64>().sqrt();
    let err_sq_beta: f64 = s.rb_mean_beta.iter().zip(beta0.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    let tk = &s.tail[0];
    let tb = &s.tail[1];
    row.err_sq = Some(err_sq);
    row.err_sq_se = Some(err_sq_se);
    row.trace_var = Some(s.trace_var_kbeta);
    row.trace_var_se = Some(s.cond_trace_kbeta_se);
    row.err_sq_beta = Some(err_sq_beta);
    row.trace_var_beta = Some(s.trace_var_beta);
    row.tail_prob_kbeta = Some(tk.prob);
    row.tail_prob_kbeta_se = Some(tk.se);
    row.tail_prob_beta = Some(tb.prob);
    row.tail_prob_beta_se = Some(tb.se);
    row.rhat_max = Some(s.rhat_max());
    row.ess_min = Some(s.ess_min);
    // P(|K beta - K beta0|^2 >= t | Y) <= E(|K beta - K beta0|^2 | Y) / t
    let t = row.threshold_kbeta;
    let slack = 3.0 * (tk.se + (err_sq_se + s.cond_trace_kbeta_se) / t);
    row.markov_ok = Some(tk.prob <= (err_sq + s.trace_var_kbeta) / t + slack);
    if !(s.rhat_max() < config.rhat_limit) {
        row.flags = "rhat".into();
    }
    Ok(row)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub q_n: usize,
    pub p: usize,
    pub cells: usize,
    pub used: usize,
    pub flagged: usize,
    pub err_sq: MeanSe,
    pub trace_var: MeanSe,
    pub err_sq_beta: MeanSe,
    pub trace_var_beta: MeanSe,
    pub tail_prob_kbeta: MeanSe,
    pub tail_prob_beta: MeanSe,
    pub err_sq_over_q: MeanSe,
    pub trace_var_over_q: MeanSe,
    pub err_sq_over_q_t2sq: MeanSe,
    pub err_sq_over_minimax: MeanSe,
    /// `|E(beta | Y) - beta0|^2 / sqrt(q_n t1^-2 n^1.5)`.
    pub consistency_metric: MeanSe,
    pub t1: MeanSe,
    pub t2: MeanSe,
    /// Mean over used cells of `q_n t2^2`.
    pub rate_q_t2sq: f64,
    pub markov_violations: usize,
}

pub fn aggregate(rows: &[ContractionRow]) -> Vec<Aggregate> {
    let mut ns: Vec<usize> = rows.iter().map(|r| r.n).collect();
    ns.sort_unstable();
    ns.dedup();
    ns.into_iter()
        .map(|n| {
            let all: Vec<&ContractionRow> = rows.iter().filter(|r| r.n == n).collect();
            let used: Vec<&ContractionRow> = all.iter().copied().filter(|r| !r.is_flagged()).collect();
            let q = all[0].q_n as f64;
            let col = |f: &dyn Fn(&ContractionRow) -> Option<f64>| -> MeanSe {
                let v: Vec<f64> = used.iter().filter_map(|r| f(r)).collect();
                mean_se(&v)
            };
            Aggregate {
                n,
                q_n: all[0].q_n,
                p: all[0].p,
                cells: all.len(),
                used: used.len(),
                flagged: all.len() - used.len(),
                err_sq: col(&|r| r.err_sq),
                trace_var: col(&|r| r.trace_var),
                err_sq_beta: col(&|r| r.err_sq_beta),
                trace_var_beta: col(&|r| r.trace_var_beta),
                tail_prob_kbeta: col(&|r| r.tail_prob_kbeta),
                tail_prob_beta: col(&|r| r.tail_prob_beta),
                err_sq_over_q: col(&|r| r.err_sq.map(|e| e / q)),
                trace_var_over_q: col(&|r| r.trace_var.map(|e| e / q)),
                err_sq_over_q_t2sq: col(&|r| Some(r.err_sq? / (q * r.t2?.powi(2)))),
                err_sq_over_minimax: col(&|r| r.err_sq.map(|e| e / minimax_threshold(r.n, r.q_n))),
                consistency_metric: col(&|r| Some(r.err_sq_beta? / r.threshold_beta?)),
                t1: col(&|r| r.t1),
                t2: col(&|r| r.t2),
                rate_q_t2sq: col(&|r| r.t2.map(|t| q * t * t)).mean,
                markov_violations: used.iter().filter(|r| r.markov_ok == Some(false)).count(),
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ErrSq,
    TraceVar,
    ErrSqBeta,
    TraceVarBeta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Against {
    /// `q_n`.
    Q,
    /// `q_n t2(n)^2`.
    QT2Sq,
}

/// OLS of `ln(metric)` on `ln(rate)` over `(rate, metric)` points with positive finite values.
pub fn rate_fit_points(points: &[(f64, f64)]) -> Result<LinearFit> {
    let usable: Vec<(f64, f64)> = points
        .iter()
        .copied()
        .filter(|(r, m)| *r > 0.0 && *m > 0.0 && r.is_finite() && m.is_finite())
        .collect();
    if usable.len() < 3 {
        return Err(RvmError::InsufficientData(format!("rate fit needs at least 3 usable grid points, got {}", usable.len())));
    }
    let x: Vec<f64> = usable.iter().map(|p| p.0.ln()).collect();
    let y: Vec<f64> = usable.iter().map(|p| p.1.ln()).collect();
    ols(&x, &y)
}

pub fn rate_fit(aggregates: &[Aggregate], metric: Metric, against: Against) -> Result<LinearFit> {
    let points: Vec<(f64, f64)> = aggregates
        .iter()
        .filter(|a| a.used > 0)
        .map(|a| {
            let m = match metric {
                Metric::ErrSq => a.err_sq.mean,
                Metric::TraceVar => a.trace_var.mean,
                Metric::ErrSqBeta => a.err_sq_beta.mean,
                Metric::TraceVarBeta => a.trace_var_beta.mean,
            };
            let r = match against {
                Against::Q => a.q_n as f64,
                Against::QT2Sq => a.rate_q_t2sq,
            };
            (r, m)
        })
        .collect();
    rate_fit_points(&points)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailKind {
    /// Threshold `log(n / q_n) q_n` on `|K beta - K beta0|^2`.
    Kbeta,
    /// Threshold `sqrt(q_n t1^-2 n^1.5)` on `|beta - beta0|^2`.
    Beta,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailPoint {
    pub n: usize,
    pub mean: f64,
    pub se: f64,
}

pub fn tail_curve(aggregates: &[Aggregate], kind: TailKind) -> Vec<TailPoint> {
    aggregates
        .iter()
        .filter(|a| a.used > 0)
        .map(|a| {
            let m = match kind {
                TailKind::Kbeta => a.tail_prob_kbeta,
                TailKind::Beta => a.tail_prob_beta,
            };
            TailPoint { n: a.n, mean: m.mean, se: m.se }
        })
        .collect()
}

/// Tail curve that is non-increasing within `2` pooled standard errors between every
/// pair of grid points, or uniformly below `floor`.
pub fn tail_non_increasing(curve: &[TailPoint], floor: f64) -> bool {
    if curve.iter().all(|p| p.mean < floor) {
        return true;
    }
    curve.iter().enumerate().all(|(i, a)| {
        curve[i + 1..].iter().all(|b| b.mean <= a.mean + 2.0 * (a.se * a.se + b.se * b.se).sqrt())
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedFit {
    pub metric: Metric,
    pub against: Against,
    pub fit: Option<LinearFit>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub config: ExperimentConfig,
    pub aggregates: Vec<Aggregate>,
    pub fits: Vec<NamedFit>,
    pub tail_kbeta: Vec<TailPoint>,
    pub tail_beta: Vec<TailPoint>,
    /// Max over min of the mean consistency metric across the grid.
    pub consistency_spread: Option<f64>,
    pub flagged_cells: usize,
    pub markov_violations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<ContractionRow>,
    pub summary: BenchSummary,
}

pub fn summarize_bench(config: &ExperimentConfig, rows: Vec<ContractionRow>) -> BenchReport {
    let aggregates = aggregate(&rows);
    let mut fits = Vec::new();
    for metric in [Metric::ErrSq, Metric::TraceVar, Metric::ErrSqBeta, Metric::TraceVarBeta] {
        for against in [Against::Q, Against::QT2Sq] {
            let (fit, error) = match rate_fit(&aggregates, metric, against) {
                Ok(f) => (Some(f), None),
                Err(e) => (None, Some(e.to_string())),
            };
            fits.push(NamedFit { metric, against, fit, error });
        }
    }
    let cm: Vec<f64> = aggregates.iter().filter(|a| a.used > 0).map(|a| a.consistency_metric.mean).collect();
    let consistency_spread = (cm.len() >= 2).then(|| {
        let max = cm.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = cm.iter().copied().fold(f64::INFINITY, f64::min);
        max / min
    });
    let summary = BenchSummary {
        config: config.clone(),
        tail_kbeta: tail_curve(&aggregates, TailKind::Kbeta),
        tail_beta: tail_curve(&aggregates, TailKind::Beta),
        flagged_cells: rows.iter().filter(|r| r.is_flagged()).count(),
        markov_violations: aggregates.iter().map(|a| a.markov_violations).sum(),
        consistency_spread,
        aggregates,
        fits,
    };
    BenchReport { rows, summary }
}

impl BenchSummary {
    pub fn fit(&self, metric: Metric, against: Against) -> Option<&LinearFit> {
        self.fits.iter().find(|f| f.metric == metric && f.against == against).and_then(|f| f.fit.as_ref())
    }
}

/// Runs every `(n, replicate)` cell on the current rayon pool; row order is `(n, replicate)`.
pub fn run_bench(config: &ExperimentConfig) -> Result<BenchReport> {
    config.validate()?;
    let cells: Vec<(usize, usize)> = config
        .n_grid
        .iter()
        .flat_map(|&n| (0..config.replicates).map(move |r| (n, r)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(n, r)| run_cell(config, n, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize_bench(config, rows))
}

pub fn write_cells_csv<W: Write>(w: W, rows: &[ContractionRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_cells_csv<R: std::io::Read>(r: R) -> Result<Vec<ContractionRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for rec in rdr.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

fn write_dat(path: &Path, header: &str, points: &[(f64, f64)]) -> Result<()> {
    let mut s = format!("# {header}\n");
    for (x, y) in points {
        s.push_str(&format!("{x} {y}\n"));
    }
    fs::write(path, s)?;
    Ok(())
}

/// Writes `cells.csv`, `summary.json` and gnuplot two-column `.dat` curves into `dir`.
pub fn write_outputs(dir: &Path, report: &BenchReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut buf = Vec::new();
    write_cells_csv(&mut buf, &report.rows)?;
    fs::write(dir.join("cells.csv"), buf)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&report.summary)?)?;
    let aggs: Vec<&Aggregate> = report.summary.aggregates.iter().filter(|a| a.used > 0).collect();
    let pts = |f: &dyn Fn(&Aggregate) -> (f64, f64)| aggs.iter().map(|a| f(a)).collect::<Vec<_>>();
    write_dat(&dir.join("err_sq_vs_q.dat"), "q_n mean_err_sq", &pts(&|a| (a.q_n as f64, a.err_sq.mean)))?;
    write_dat(&dir.join("trace_var_vs_q.dat"), "q_n mean_trace_var", &pts(&|a| (a.q_n as f64, a.trace_var.mean)))?;
    write_dat(&dir.join("err_sq_vs_q_t2sq.dat"), "q_n*t2^2 mean_err_sq", &pts(&|a| (a.rate_q_t2sq, a.err_sq.mean)))?;
    write_dat(&dir.join("consistency_metric.dat"), "n mean_normalized_beta_error", &pts(&|a| (a.n as f64, a.consistency_metric.mean)))?;
    write_dat(&dir.join("tail_kbeta.dat"), "n mean_tail_prob_kbeta", &pts(&|a| (a.n as f64, a.tail_prob_kbeta.mean)))?;
    write_dat(&dir.join("tail_beta.dat"), "n mean_tail_prob_beta", &pts(&|a| (a.n as f64, a.tail_prob_beta.mean)))?;
    Ok(())
}
