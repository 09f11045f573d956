//! MCMC diagnostics: effective sample size and split-R-hat.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ess {
    pub ess: f64,
    /// Set when the series has zero variance; `ess` then equals the length.
    pub degenerate: bool,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// ESS from Geyer's initial monotone sequence estimator of the integrated autocorrelation time.
pub fn ess(xs: &[f64]) -> Ess {
    let n = xs.len();
    if n < 4 {
        return Ess { ess: n as f64, degenerate: true };
    }
    let m = mean(xs);
    let centered: Vec<f64> = xs.iter().map(|x| x - m).collect();
    let c0 = centered.iter().map(|v| v * v).sum::<f64>() / n as f64;
    // rounding in the mean of a constant series leaves c0 near (n eps |m|)^2
    if !(c0 > (1e-12 * m).powi(2)) {
        return Ess { ess: n as f64, degenerate: true };
    }
    let rho = |lag: usize| -> f64 {
        centered[..n - lag].iter().zip(&centered[lag..]).map(|(a, b)| a * b).sum::<f64>() / (n as f64 * c0)
    };
    let mut tau = -1.0;
    let mut prev_pair = f64::INFINITY;
    let mut k = 0;
    while 2 * k + 1 < n {
        let pair = if k == 0 { 1.0 + rho(1) } else { rho(2 * k) + rho(2 * k + 1) };
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        tau += 2.0 * pair;
        prev_pair = pair;
        k += 1;
    }
    // floor at 1/log10(n), as in common implementations, to bound super-efficiency
    let tau = tau.max(1.0 / (n as f64).log10());
    Ess { ess: n as f64 / tau, degenerate: false }
}

/// ESS of several chains of the same quantity, summed over chains.
pub fn ess_chains(chains: &[&[f64]]) -> Ess {
    let parts: Vec<Ess> = chains.iter().map(|c| ess(c)).collect();
    Ess {
        ess: parts.iter().map(|e| e.ess).sum(),
        degenerate: parts.iter().all(|e| e.degenerate),
    }
}

/// Monte-Carlo standard error of the mean of an autocorrelated series.
pub fn mc_se(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    let e = ess(xs);
    if e.degenerate {
        0.0
    } else {
        (var / e.ess).sqrt()
    }
}

/// Between-chain and within-chain variances `(B, W)` of equal-length chains.
pub fn between_within(chains: &[&[f64]]) -> (f64, f64) {
    let m = chains.len() as f64;
    let l = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = if chains.len() > 1 {
        l / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>()
    } else {
        0.0
    };
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (l - 1.0))
        .sum::<f64>()
        / m;
    (b, w)
}

/// Split-R-hat: each chain is cut in half and the classic potential scale reduction is
/// computed on the halves. Returns 1 for constant input and infinity when chains are
/// individually constant but disagree.
pub fn split_rhat(chains: &[&[f64]]) -> f64 {
    let len = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    let half = len / 2;
    if half < 2 {
        return f64::NAN;
    }
    let mut pieces: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let c = &c[..len];
        pieces.push(&c[..half]);
        pieces.push(&c[len - half..]);
    }
    let (b, w) = between_within(&pieces);
    if w == 0.0 {
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let l = half as f64;
    let var_plus = (l - 1.0) / l * w + b / l;
    (var_plus / w).sqrt()
}
