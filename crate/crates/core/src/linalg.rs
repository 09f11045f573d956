//! Dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Result, RvmError};

/// Relative jitter added to the diagonal on the single retry of a failed
/// Cholesky factorization, as a multiple of `tr(A)/n`.
pub const JITTER_SCALE: f64 = 1e-10;

/// Cholesky factor of a symmetric positive-definite matrix.
#[derive(Clone, Debug)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    /// Diagonal jitter that had to be added, zero when the first attempt succeeded.
    pub jitter: f64,
}

impl SpdFactor {
    /// Factorizes `a`, retrying once with diagonal jitter `1e-10 * tr(a) / n`.
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || n != a.ncols() {
            return Err(RvmError::InvalidInput(format!(
                "expected a non-empty square matrix, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(RvmError::Numerical(
                "matrix to factorize has non-finite entries".into(),
            ));
        }
        let trace = a.trace();
        let diag_min = a.diagonal().min();
        let diag_max = a.diagonal().max();
        match a.clone().cholesky() {
            Some(chol) => Ok(Self { chol, jitter: 0.0 }),
            None => {
                let jitter = JITTER_SCALE * trace / n as f64;
                let mut retry = a;
                for i in 0..n {
                    retry[(i, i)] += jitter;
                }
                match retry.cholesky() {
                    Some(chol) => Ok(Self { chol, jitter }),
                    None => Err(RvmError::Numerical(format!(
                        "Cholesky factorization failed after jitter {jitter:.3e} \
                         (n = {n}, trace = {trace:.6e}, diagonal range [{diag_min:.6e}, {diag_max:.6e}])"
                    ))),
                }
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// Returns `L^{-T} z`, which has covariance `A^{-1}` when `z` is standard normal.
    pub fn solve_upper_transpose(&self, z: &DVector<f64>) -> DVector<f64> {
        let l = self.chol.l_dirty();
        l.tr_solve_lower_triangular(z)
            .expect("Cholesky factor has a non-zero diagonal")
    }

    /// Dense copy of the lower factor `L` with `A = L L^T`.
    pub fn lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// `log |A|`.
    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    /// Diagonal of `A^{-1}`, computed from the columns of `L^{-1}`.
    ///
    /// Column `i` of `L^{-1}` solves `L x = e_i`, which is zero above row `i`;
    /// `(A^{-1})_{ii}` is its squared norm. Costs about `n^3 / 6` flops.
    pub fn inverse_diagonal(&self) -> DVector<f64> {
        let l = self.chol.l_dirty();
        let n = l.nrows();
        let mut out = DVector::zeros(n);
        let mut x = vec![0.0; n];
        for i in 0..n {
            x[i..].iter_mut().for_each(|v| *v = 0.0);
            x[i] = 1.0;
            let mut acc = 0.0;
            for j in i..n {
                let col = l.column(j);
                let xj = x[j] / col[j];
                x[j] = xj;
                acc += xj * xj;
                if xj != 0.0 {
                    let tail = &col.as_slice()[j + 1..];
                    for (xk, lkj) in x[j + 1..].iter_mut().zip(tail) {
                        *xk -= lkj * xj;
                    }
                }
            }
            out[i] = acc;
        }
        out
    }
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn symmetric_eigenvalues(a: &DMatrix<f64>) -> Result<Vec<f64>> {
    let eig = a
        .clone()
        .try_symmetric_eigen(f64::EPSILON, 10_000)
        .ok_or_else(|| {
            RvmError::Numerical(format!(
                "symmetric eigensolver did not converge on a {}x{} matrix",
                a.nrows(),
                a.ncols()
            ))
        })?;
    let mut values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    values.sort_by(f64::total_cmp);
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(n: usize) -> DMatrix<f64> {
        let b = DMatrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.4);
        &b * b.transpose() + DMatrix::identity(n, n)
    }

    #[test]
    fn inverse_diagonal_matches_dense_inverse() {
        let a = spd(9);
        let f = SpdFactor::new(a.clone()).unwrap();
        let inv = a.try_inverse().unwrap();
        let d = f.inverse_diagonal();
        for i in 0..9 {
            assert!((d[i] - inv[(i, i)]).abs() < 1e-12 * inv[(i, i)].abs().max(1.0));
        }
    }

    #[test]
    fn log_det_and_solve() {
        let a = spd(5);
        let f = SpdFactor::new(a.clone()).unwrap();
        assert!((f.log_det() - a.determinant().ln()).abs() < 1e-10);
        let b = DVector::from_fn(5, |i, _| i as f64 - 2.0);
        let x = f.solve(&b);
        assert!((&a * x - b).norm() < 1e-10);
    }

    #[test]
    fn jitter_rescues_singular_psd_matrix() {
        // rank one
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let a = &v * v.transpose();
        let f = SpdFactor::new(a).unwrap();
        assert!(f.jitter > 0.0);
    }

    #[test]
    fn indefinite_matrix_is_a_numerical_error() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let err = SpdFactor::new(a).unwrap_err();
        assert!(err.is_numerical());
        assert!(err.to_string().contains("jitter"));
    }

    #[test]
    fn eigenvalues_of_two_by_two() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.9, 0.9, 1.0]);
        let ev = symmetric_eigenvalues(&a).unwrap();
        assert!((ev[0] - 0.1).abs() < 1e-12);
        assert!((ev[1] - 1.9).abs() < 1e-12);
    }
}
