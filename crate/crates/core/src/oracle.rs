//! Brute-force posterior for `n <= 3` by tensor-grid integration over `ln lambda^2`.
//!
//! The marginal posterior of `Lambda^2` is
//!
//! ```text
//! pi(Lambda^2 | Y) ∝ pi(Lambda^2) |K^2 Lambda^2 + tau^-2 I|^(-1/2) (b + Q(Lambda))^(-(n + a)/2)
//! ```
//!
//! with `Q = Y'(I - K A^-1 K)Y`. The determinant is taken from the symmetric form
//! `Lambda K^2 Lambda + tau^-2 I`, which has the same value.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RvmError};
use crate::gibbs::Hyperparams;
use crate::linalg::SpdFactor;
use crate::prior::LocalVariancePrior;

pub const MAX_ORACLE_N: usize = 3;
pub const MAX_NODES: usize = 1_000_000;
pub const MIN_NODES_PER_DIM: usize = 32;
/// Largest share of posterior weight allowed on boundary nodes.
pub const EDGE_MASS_LIMIT: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub nodes_per_dim: usize,
    /// `(lo, hi)` for every coordinate; defaults to the prior quantiles at
    /// `tail_level` and `1 - tail_level`.
    #[serde(default)]
    pub lambda_sq_range: Option<(f64, f64)>,
    #[serde(default = "default_tail_level")]
    pub tail_level: f64,
    /// Also evaluate with doubled `nodes_per_dim` and report the relative change.
    #[serde(default)]
    pub refine: bool,
}

fn default_tail_level() -> f64 {
    1e-4
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { nodes_per_dim: 64, lambda_sq_range: None, tail_level: default_tail_level(), refine: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub mean_beta: Vec<f64>,
    pub mean_kbeta: Vec<f64>,
    pub trace_var_kbeta: f64,
    pub trace_var_beta: f64,
    pub mean_sigma_sq: f64,
    /// `ln` of the grid integral of the unnormalized weights over `ln lambda^2` coordinates.
    pub log_normalizer: f64,
    pub edge_mass: f64,
    /// Max relative change of `mean_beta` under node doubling, when requested.
    pub refinement_rel_change: Option<f64>,
    /// Grid used, with the resolved range.
    pub grid: GridSpec,
}

/// Per-node conditional quantities.
struct NodeEval {
    log_weight: f64,
    mean: DVector<f64>,
    e_sigma: f64,
    tr_kak: f64,
    tr_ainv: f64,
}

fn eval_node(
    k: &DMatrix<f64>,
    k2: &DMatrix<f64>,
    ky: &DVector<f64>,
    yty: f64,
    hyper: &Hyperparams,
    lambda_sq: &DVector<f64>,
) -> Result<NodeEval> {
    let n = lambda_sq.len();
    let lam = lambda_sq.map(f64::sqrt);
    // B = Lambda K^2 Lambda + tau^-2 I, A^-1 = Lambda B^-1 Lambda
    let mut b = DMatrix::from_fn(n, n, |i, j| lam[i] * k2[(i, j)] * lam[j]);
    for i in 0..n {
        b[(i, i)] += 1.0 / hyper.tau_sq;
    }
    let f = SpdFactor::new(b)?;
    let mut binv = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        binv.set_column(j, &f.solve(&e));
    }
    let ainv = DMatrix::from_fn(n, n, |i, j| lam[i] * binv[(i, j)] * lam[j]);
    let mean = &ainv * ky;
    let q = (yty - ky.dot(&mean)).max(0.0);
    let nf = n as f64;
    let e_sigma = (hyper.b + q) / (nf + hyper.a - 2.0);
    let tr_kak = (k * &ainv * k).trace();
    let log_weight = -0.5 * f.log_det() - 0.5 * (nf + hyper.a) * (hyper.b + q).ln();
    Ok(NodeEval { log_weight, mean, e_sigma, tr_kak, tr_ainv: ainv.trace() })
}

/// Unnormalized `ln pi(Lambda^2 | Y)` at one point (prior density included).
pub fn log_posterior_weight(
    k: &DMatrix<f64>,
    y: &DVector<f64>,
    prior: &LocalVariancePrior,
    hyper: &Hyperparams,
    lambda_sq: &DVector<f64>,
) -> Result<f64> {
    let k2 = k * k;
    let ky = k * y;
    let node = eval_node(k, &k2, &ky, y.dot(y), hyper, lambda_sq)?;
    let mut lp = node.log_weight;
    for l in lambda_sq.iter() {
        lp += prior.ln_density(*l)?;
    }
    Ok(lp)
}

fn resolve_range(prior: &LocalVariancePrior, grid: &GridSpec) -> Result<(f64, f64)> {
    let (lo, hi) = match grid.lambda_sq_range {
        Some(r) => r,
        None => {
            if !(grid.tail_level > 0.0 && grid.tail_level < 0.5) {
                return Err(RvmError::InvalidParameter(format!("tail_level must be in (0, 0.5), got {}", grid.tail_level)));
            }
            (prior.quantile(grid.tail_level)?, prior.quantile(1.0 - grid.tail_level)?)
        }
    };
    if !(lo > 0.0 && hi > lo && hi.is_finite()) {
        return Err(RvmError::InvalidParameter(format!("need 0 < lo < hi, got ({lo}, {hi})")));
    }
    Ok((lo, hi))
}

fn integrate_grid(
    k: &DMatrix<f64>,
    y: &DVector<f64>,
    prior: &LocalVariancePrior,
    hyper: &Hyperparams,
    nodes: usize,
    lo: f64,
    hi: f64,
) -> Result<(OracleResult, f64)> {
    let n = y.len();
    let total = nodes.checked_pow(n as u32).filter(|t| *t <= MAX_NODES).ok_or_else(|| {
        RvmError::Unsupported(format!("{nodes}^{n} grid nodes exceed the limit of {MAX_NODES}"))
    })?;
    let (ulo, uhi) = (lo.ln(), hi.ln());
    let h = (uhi - ulo) / (nodes - 1) as f64;
    let axis: Vec<f64> = (0..nodes).map(|i| ulo + h * i as f64).collect();
    // per-axis log of (trapezoid weight * prior density * Jacobian lambda^2)
    let axis_log: Vec<f64> = axis
        .iter()
        .enumerate()
        .map(|(i, &u)| {
            let trap: f64 = if i == 0 || i == nodes - 1 { 0.5 } else { 1.0 };
            Ok(trap.ln() + prior.ln_density(u.exp())? + u)
        })
        .collect::<Result<_>>()?;

    let k2 = k * k;
    let ky = k * y;
    let yty = y.dot(y);
    let evals: Vec<(NodeEval, bool)> = (0..total)
        .into_par_iter()
        .map(|flat| {
            let mut idx = flat;
            let mut lam = DVector::zeros(n);
            let mut extra = 0.0;
            let mut edge = false;
            for d in 0..n {
                let i = idx % nodes;
                idx /= nodes;
                lam[d] = axis[i].exp();
                extra += axis_log[i];
                edge |= i == 0 || i == nodes - 1;
            }
            let mut e = eval_node(k, &k2, &ky, yty, hyper, &lam)?;
            e.log_weight += extra;
            Ok((e, edge))
        })
        .collect::<Result<_>>()?;

    let max_lw = evals.iter().map(|(e, _)| e.log_weight).fold(f64::NEG_INFINITY, f64::max);
    if !max_lw.is_finite() {
        return Err(RvmError::Numerical("all oracle weights vanish".into()));
    }
    let mut wsum = 0.0;
    let mut edge_w = 0.0;
    let mut mean = DVector::zeros(n);
    let mut kmean = DVector::zeros(n);
    let mut kmean_sq = DVector::zeros(n);
    let mut mean_sq = DVector::zeros(n);
    let (mut cond_k, mut cond_b, mut sig) = (0.0, 0.0, 0.0);
    for (e, edge) in &evals {
        let w = (e.log_weight - max_lw).exp();
        wsum += w;
        if *edge {
            edge_w += w;
        }
        let km = k * &e.mean;
        mean += &e.mean * w;
        mean_sq += e.mean.component_mul(&e.mean) * w;
        kmean += &km * w;
        kmean_sq += km.component_mul(&km) * w;
        cond_k += w * e.e_sigma * e.tr_kak;
        cond_b += w * e.e_sigma * e.tr_ainv;
        sig += w * e.e_sigma;
    }
    mean /= wsum;
    mean_sq /= wsum;
    kmean /= wsum;
    kmean_sq /= wsum;
    let spread = |sq: &DVector<f64>, m: &DVector<f64>| -> f64 {
        sq.iter().zip(m.iter()).map(|(s, v)| (s - v * v).max(0.0)).sum()
    };
    let result = OracleResult {
        mean_beta: mean.iter().copied().collect(),
        mean_kbeta: kmean.iter().copied().collect(),
        trace_var_kbeta: cond_k / wsum + spread(&kmean_sq, &kmean),
        trace_var_beta: cond_b / wsum + spread(&mean_sq, &mean),
        mean_sigma_sq: sig / wsum,
        log_normalizer: max_lw + wsum.ln() + n as f64 * h.ln(),
        edge_mass: edge_w / wsum,
        refinement_rel_change: None,
        grid: GridSpec { nodes_per_dim: nodes, lambda_sq_range: Some((lo, hi)), tail_level: 0.0, refine: false },
    };
    Ok((result, edge_w / wsum))
}

fn validate(k: &DMatrix<f64>, y: &DVector<f64>, prior: &LocalVariancePrior, hyper: &Hyperparams) -> Result<()> {
    let n = y.len();
    if n > MAX_ORACLE_N {
        return Err(RvmError::Unsupported(format!("oracle handles n <= {MAX_ORACLE_N}, got n={n}")));
    }
    if n == 0 || k.nrows() != n || k.ncols() != n {
        return Err(RvmError::InvalidInput(format!("kernel is {}x{} but Y has length {n}", k.nrows(), k.ncols())));
    }
    prior.validate()?;
    hyper.validate()?;
    if n as f64 + hyper.a <= 2.0 {
        return Err(RvmError::InvalidParameter(format!("need n + a > 2, got n={n}, a={}", hyper.a)));
    }
    Ok(())
}

pub fn oracle_posterior(
    k: &DMatrix<f64>,
    y: &DVector<f64>,
    prior: &LocalVariancePrior,
    hyper: &Hyperparams,
    grid: &GridSpec,
) -> Result<OracleResult> {
    validate(k, y, prior, hyper)?;
    if grid.nodes_per_dim < MIN_NODES_PER_DIM {
        return Err(RvmError::InvalidParameter(format!(
            "nodes_per_dim must be at least {MIN_NODES_PER_DIM}, got {}",
            grid.nodes_per_dim
        )));
    }
    if let LocalVariancePrior::PointMass { value } = *prior {
        let n = y.len();
        let e = eval_node(&(k.clone()), &(k * k), &(k * y), y.dot(y), hyper, &DVector::from_element(n, value))?;
        let km = k * &e.mean;
        return Ok(OracleResult {
            mean_beta: e.mean.iter().copied().collect(),
            mean_kbeta: km.iter().copied().collect(),
            trace_var_kbeta: e.e_sigma * e.tr_kak,
            trace_var_beta: e.e_sigma * e.tr_ainv,
            mean_sigma_sq: e.e_sigma,
            log_normalizer: e.log_weight,
            edge_mass: 0.0,
            refinement_rel_change: None,
            grid: GridSpec { nodes_per_dim: 1, lambda_sq_range: Some((value, value)), tail_level: 0.0, refine: false },
        });
    }
    let (lo, hi) = resolve_range(prior, grid)?;
    let (mut result, edge_mass) = integrate_grid(k, y, prior, hyper, grid.nodes_per_dim, lo, hi)?;
    if edge_mass > EDGE_MASS_LIMIT {
        return Err(RvmError::RangeTooNarrow { edge_mass });
    }
    if grid.refine {
        let (fine, _) = integrate_grid(k, y, prior, hyper, 2 * grid.nodes_per_dim, lo, hi)?;
        let scale = result.mean_beta.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let change = result
            .mean_beta
            .iter()
            .zip(&fine.mean_beta)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        result.refinement_rel_change = Some(change / scale);
    }
    result.grid.tail_level = grid.tail_level;
    result.grid.refine = grid.refine;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_large_n_and_coarse_grids() {
        let k = DMatrix::identity(4, 4);
        let y = DVector::zeros(4);
        let prior = LocalVariancePrior::InverseGamma { shape: 3.0, scale: 1.0 };
        let h = Hyperparams { a: 1.0, b: 1.0, tau_sq: 1.0 };
        assert!(matches!(oracle_posterior(&k, &y, &prior, &h, &GridSpec::default()), Err(RvmError::Unsupported(_))));
        let g = GridSpec { nodes_per_dim: 16, ..Default::default() };
        let k = DMatrix::identity(1, 1);
        assert!(oracle_posterior(&k, &DVector::zeros(1), &prior, &Hyperparams { a: 2.0, ..h }, &g).is_err());
    }

    #[test]
    fn narrow_range_is_reported() {
        let k = DMatrix::identity(1, 1);
        let y = DVector::from_element(1, 1.0);
        let prior = LocalVariancePrior::InverseGamma { shape: 3.0, scale: 1.0 };
        let h = Hyperparams { a: 2.0, b: 1.0, tau_sq: 1.0 };
        let g = GridSpec { nodes_per_dim: 64, lambda_sq_range: Some((0.3, 0.4)), ..Default::default() };
        assert!(matches!(oracle_posterior(&k, &y, &prior, &h, &g), Err(RvmError::RangeTooNarrow { .. })));
    }
}
