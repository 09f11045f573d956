//! Kernel matrices, design generators and spectral certificates.
//!
//! Two kernel families are supported:
//!
//! ```text
//! gaussian:    K(x, y) = exp(-|x - y|^2 / theta) / s
//! polynomial:  K(x, y) = (x . y + 1)^theta / s
//! ```
//!
//! where `s` is an optional positive scale normalization (`p^theta` when the
//! polynomial kernel is studied on near-orthogonal designs, 1 otherwise).

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RvmError};
use crate::linalg::{symmetric_eigenvalues, SpdFactor};

/// Absolute slack used when comparing eigenvalues against certificate bounds.
pub const EIGEN_SLACK: f64 = 1e-9;

/// Above this value of `theta * ln(x.y + 1)` polynomial entries are evaluated in log space.
const LOG_SPACE_CUTOFF: f64 = 700.0;

/// `n x p` matrix whose rows are the covariate vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignMatrix {
    rows: DMatrix<f64>,
}

impl DesignMatrix {
    pub fn new(rows: DMatrix<f64>) -> Result<Self> {
        if rows.nrows() == 0 || rows.ncols() == 0 {
            return Err(RvmError::InvalidInput(format!(
                "design must have n >= 1 and p >= 1, got {}x{}",
                rows.nrows(),
                rows.ncols()
            )));
        }
        if let Some(idx) = rows.iter().position(|v| !v.is_finite()) {
            let (i, j) = (idx % rows.nrows(), idx / rows.nrows());
            return Err(RvmError::InvalidInput(format!(
                "design entry ({i}, {j}) is not finite"
            )));
        }
        Ok(Self { rows })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != p) {
            return Err(RvmError::InvalidInput(format!(
                "row {i} has dimension {}, expected {p}",
                r.len()
            )));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(DMatrix::from_row_slice(n, p, &flat))
    }

    pub fn n(&self) -> usize {
        self.rows.nrows()
    }

    pub fn p(&self) -> usize {
        self.rows.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.rows
    }

    /// Gram matrix `X X^T` of row inner products.
    pub fn gram(&self) -> DMatrix<f64> {
        &self.rows * self.rows.transpose()
    }

    fn sq_distance(&self, i: usize, j: usize) -> f64 {
        self.rows
            .row(i)
            .iter()
            .zip(self.rows.row(j).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    fn dot(&self, i: usize, j: usize) -> f64 {
        self.rows.row(i).dot(&self.rows.row(j))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Gaussian,
    Polynomial,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub theta: f64,
    #[serde(default = "one")]
    pub scale_normalization: f64,
}

fn one() -> f64 {
    1.0
}

impl KernelSpec {
    pub fn gaussian(theta: f64) -> Self {
        Self { family: KernelFamily::Gaussian, theta, scale_normalization: 1.0 }
    }

    pub fn polynomial(theta: f64) -> Self {
        Self { family: KernelFamily::Polynomial, theta, scale_normalization: 1.0 }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale_normalization = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(RvmError::InvalidParameter(format!(
                "kernel theta must be positive, got {}",
                self.theta
            )));
        }
        if !(self.scale_normalization > 0.0 && self.scale_normalization.is_finite()) {
            return Err(RvmError::InvalidParameter(format!(
                "scale normalization must be positive, got {}",
                self.scale_normalization
            )));
        }
        Ok(())
    }

    /// Gaussian entry from a squared distance.
    fn gaussian_entry(&self, sq_dist: f64) -> f64 {
        (-sq_dist / self.theta).exp() / self.scale_normalization
    }

    /// Polynomial entry from an inner product; `None` when the value is undefined or overflows.
    fn polynomial_entry(&self, dot: f64) -> std::result::Result<f64, String> {
        let base = dot + 1.0;
        let theta = self.theta;
        if base == 0.0 {
            return Ok(0.0);
        }
        let integral = theta.fract() == 0.0;
        if base < 0.0 && !integral {
            return Err(format!(
                "negative base {base} raised to non-integer power {theta}"
            ));
        }
        let log_mag = theta * base.abs().ln();
        let value = if log_mag > LOG_SPACE_CUTOFF {
            let sign = if base < 0.0 && (theta as i64) % 2 == 1 { -1.0 } else { 1.0 };
            sign * (log_mag - self.scale_normalization.ln()).exp()
        } else if integral && theta <= i32::MAX as f64 {
            base.powi(theta as i32) / self.scale_normalization
        } else {
            base.powf(theta) / self.scale_normalization
        };
        if value.is_finite() {
            Ok(value)
        } else {
            Err(format!(
                "entry overflows: theta * ln|x.y + 1| = {log_mag:.3} exceeds double range after scaling"
            ))
        }
    }
}

/// Symmetric kernel matrix together with the spec it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelMatrix {
    entries: DMatrix<f64>,
    spec: KernelSpec,
}

impl KernelMatrix {
    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn into_entries(self) -> DMatrix<f64> {
        self.entries
    }
}

/// Builds `K_n` from the rows of `x`. Only the upper triangle is evaluated;
/// the lower triangle is a copy, so the result is exactly symmetric.
pub fn build_kernel(x: &DesignMatrix, spec: &KernelSpec) -> Result<KernelMatrix> {
    spec.validate()?;
    let n = x.n();
    let mut k = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..=j {
            let v = match spec.family {
                KernelFamily::Gaussian => spec.gaussian_entry(x.sq_distance(i, j)),
                KernelFamily::Polynomial => spec
                    .polynomial_entry(x.dot(i, j))
                    .map_err(|reason| RvmError::Construction { i, j, reason })?,
            };
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(KernelMatrix { entries: k, spec: *spec })
}

/// Verified eigenvalue interval of a kernel matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralCertificate {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub c1: f64,
    pub c2: f64,
    pub satisfied: bool,
}

impl SpectralCertificate {
    pub fn condition_ratio(&self) -> f64 {
        self.lambda_max / self.lambda_min
    }
}

/// Eigen-decomposes `k` and checks `c1 I <= K <= c2 I` up to [`EIGEN_SLACK`].
pub fn spectral_certificate(k: &DMatrix<f64>, c1: f64, c2: f64) -> Result<SpectralCertificate> {
    if !k.is_square() || k.nrows() == 0 {
        return Err(RvmError::InvalidInput("certificate needs a non-empty square matrix".into()));
    }
    if k != &k.transpose() {
        return Err(RvmError::InvalidInput("certificate needs a symmetric matrix".into()));
    }
    let ev = symmetric_eigenvalues(k)?;
    let lambda_min = ev[0];
    let lambda_max = ev[ev.len() - 1];
    let satisfied = c1 - EIGEN_SLACK <= lambda_min && lambda_max <= c2 + EIGEN_SLACK;
    Ok(SpectralCertificate { lambda_min, lambda_max, c1, c2, satisfied })
}

/// Result of the pairwise-separation check for Gaussian kernels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub min_sq_distance: f64,
    pub threshold: f64,
    pub satisfied: bool,
}

/// Checks `|x_i - x_j|^2 >= 2 theta ln n` for all `i != j`.
pub fn check_gaussian_separation(x: &DesignMatrix, theta: f64) -> Result<SeparationReport> {
    let n = x.n();
    if n < 2 {
        return Err(RvmError::InvalidInput("separation check needs n >= 2".into()));
    }
    if !(theta > 0.0) {
        return Err(RvmError::InvalidParameter(format!("theta must be positive, got {theta}")));
    }
    let mut min_sq_distance = f64::INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            min_sq_distance = min_sq_distance.min(x.sq_distance(i, j));
        }
    }
    let threshold = 2.0 * theta * (n as f64).ln();
    Ok(SeparationReport { min_sq_distance, threshold, satisfied: min_sq_distance >= threshold })
}

/// Result of the near-orthogonality check for scaled polynomial kernels.
///
/// `h` and `k` are the rates `2 a_U n` and `n^4`; the tolerances are their reciprocals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NearOrthogonalityReport {
    pub max_diag_dev: f64,
    pub max_offdiag: f64,
    pub h: f64,
    pub k: f64,
    pub satisfied: bool,
}

/// Checks `|(x_i.x_i + 1)/p - 1| <= 1/h(n)` and `|(x_i.x_j + 1)/p| <= 1/k(n)`.
pub fn check_near_orthogonality(
    x: &DesignMatrix,
    a_l: f64,
    a_u: f64,
) -> Result<NearOrthogonalityReport> {
    if !(a_l > 0.5) {
        return Err(RvmError::InvalidParameter(format!(
            "lower theta bound a_L must exceed 1/2, got {a_l}"
        )));
    }
    if !(a_u >= a_l) {
        return Err(RvmError::InvalidParameter(format!("need a_L <= a_U, got [{a_l}, {a_u}]")));
    }
    let n = x.n();
    let p = x.p() as f64;
    let gram = x.gram();
    let mut max_diag_dev: f64 = 0.0;
    let mut max_offdiag: f64 = 0.0;
    for i in 0..n {
        max_diag_dev = max_diag_dev.max(((gram[(i, i)] + 1.0) / p - 1.0).abs());
        for j in (i + 1)..n {
            max_offdiag = max_offdiag.max(((gram[(i, j)] + 1.0) / p).abs());
        }
    }
    let nf = n as f64;
    let h = 2.0 * a_u * nf;
    let k = nf.powi(4);
    Ok(NearOrthogonalityReport {
        max_diag_dev,
        max_offdiag,
        h,
        k,
        satisfied: max_diag_dev <= 1.0 / h && max_offdiag <= 1.0 / k,
    })
}

/// Design generators.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DesignKind {
    /// `sqrt(p)` times an orthonormal n-frame in `R^p`, so `X X^T = p I`.
    ExactOrthogonal,
    /// Random rows rescaled so every pairwise squared distance is at least
    /// `SEPARATION_MARGIN * 2 theta ln n`.
    Separated { theta: f64 },
    /// Rows whose Gram matrix is `p I - 1 1^T` plus a perturbation sized to keep
    /// the near-orthogonality tolerances for `theta <= a_u`.
    PerturbedOrthogonal { a_u: f64 },
}

/// Safety factor on the separation threshold used by the generator.
pub const SEPARATION_MARGIN: f64 = 1.1;

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    DMatrix::from_row_slice(rows, cols, &data)
}

/// `n x p` matrix with orthonormal rows from the QR factorization of a seeded Gaussian matrix.
fn orthonormal_rows<R: Rng + ?Sized>(n: usize, p: usize, rng: &mut R) -> DMatrix<f64> {
    let g = gaussian_matrix(p, n, rng);
    g.qr().q().transpose()
}

pub fn generate_design<R: Rng + ?Sized>(
    n: usize,
    p: usize,
    kind: DesignKind,
    rng: &mut R,
) -> Result<DesignMatrix> {
    if n == 0 || p == 0 {
        return Err(RvmError::InvalidInput(format!("need n, p >= 1, got n={n}, p={p}")));
    }
    match kind {
        DesignKind::ExactOrthogonal => {
            if p < n {
                return Err(RvmError::InvalidInput(format!(
                    "exact_orthogonal needs p >= n, got n={n}, p={p}"
                )));
            }
            let q = orthonormal_rows(n, p, rng);
            DesignMatrix::new(q * (p as f64).sqrt())
        }
        DesignKind::Separated { theta } => {
            if !(theta > 0.0) {
                return Err(RvmError::InvalidParameter(format!("theta must be positive, got {theta}")));
            }
            let mut x = gaussian_matrix(n, p, rng);
            if n >= 2 {
                let design = DesignMatrix::new(x.clone())?;
                let report = check_gaussian_separation(&design, theta)?;
                if report.min_sq_distance <= 0.0 {
                    return Err(RvmError::Numerical("generated design has coincident rows".into()));
                }
                let target = SEPARATION_MARGIN * report.threshold;
                x *= (target / report.min_sq_distance).sqrt();
            }
            DesignMatrix::new(x)
        }
        DesignKind::PerturbedOrthogonal { a_u } => {
            if p <= n {
                return Err(RvmError::InvalidInput(format!(
                    "perturbed_orthogonal needs p > n, got n={n}, p={p}"
                )));
            }
            if !(a_u > 0.5) {
                return Err(RvmError::InvalidParameter(format!("a_U must exceed 1/2, got {a_u}")));
            }
            let nf = n as f64;
            let pf = p as f64;
            let diag_tol = pf / (8.0 * a_u * nf);
            let off_lo = pf / (4.0 * nf.powi(4));
            let mut gram = DMatrix::zeros(n, n);
            for i in 0..n {
                gram[(i, i)] = pf - 1.0 + diag_tol * (2.0 * rng.random::<f64>() - 1.0);
                for j in (i + 1)..n {
                    let eps = off_lo * (1.0 + rng.random::<f64>());
                    gram[(i, j)] = -1.0 + eps;
                    gram[(j, i)] = -1.0 + eps;
                }
            }
            let factor = SpdFactor::new(gram)?;
            if factor.jitter > 0.0 {
                return Err(RvmError::Numerical("target Gram matrix is not positive definite".into()));
            }
            let l = factor.lower();
            let q = orthonormal_rows(n, p, rng);
            DesignMatrix::new(l * q)
        }
    }
}
