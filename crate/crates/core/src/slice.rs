//! Univariate slice sampling with interval doubling (Neal 2003).

use rand::distr::Open01;
use rand::Rng;

use crate::error::{Result, RvmError};

pub const MAX_DOUBLINGS: usize = 100;
const MAX_SHRINKS: usize = 10_000;

/// Neal's acceptance test: rejects `x1` if the doubling procedure started from it
/// could not have produced the interval `(l, r)`.
fn accept<F: Fn(f64) -> f64>(logf: &F, x0: f64, x1: f64, y: f64, w: f64, l: f64, r: f64) -> bool {
    let (mut lh, mut rh) = (l, r);
    let mut differ = false;
    while rh - lh > 1.1 * w {
        let m = 0.5 * (lh + rh);
        if (x0 < m) != (x1 < m) {
            differ = true;
        }
        if x1 < m {
            rh = m;
        } else {
            lh = m;
        }
        if differ && y >= logf(lh) && y >= logf(rh) {
            return false;
        }
    }
    true
}

/// One slice-sampling update of `x0` under the unnormalized log density `logf`.
pub fn slice_step<F, R>(x0: f64, logf: F, w: f64, rng: &mut R) -> Result<f64>
where
    F: Fn(f64) -> f64,
    R: Rng + ?Sized,
{
    let f0 = logf(x0);
    if !f0.is_finite() {
        return Err(RvmError::Numerical(format!("slice start x0={x0} has log density {f0}")));
    }
    let u: f64 = rng.sample(Open01);
    let y = f0 + u.ln();

    let mut l = x0 - w * rng.sample::<f64, _>(Open01);
    let mut r = l + w;
    let mut doublings = 0;
    while y < logf(l) || y < logf(r) {
        if doublings == MAX_DOUBLINGS {
            return Err(RvmError::Numerical(format!(
                "slice interval still inside the slice after {MAX_DOUBLINGS} doublings \
                 (x0={x0}, log level={y}, interval=[{l}, {r}])"
            )));
        }
        if rng.random::<f64>() < 0.5 {
            l -= r - l;
        } else {
            r += r - l;
        }
        doublings += 1;
    }

    let (mut lb, mut rb) = (l, r);
    for _ in 0..MAX_SHRINKS {
        let x1 = lb + rng.sample::<f64, _>(Open01) * (rb - lb);
        if y < logf(x1) && accept(&logf, x0, x1, y, w, l, r) {
            return Ok(x1);
        }
        if x1 < x0 {
            lb = x1;
        } else {
            rb = x1;
        }
    }
    Err(RvmError::Numerical(format!(
        "slice shrinkage did not terminate (x0={x0}, log level={y}, interval=[{l}, {r}])"
    )))
}
