use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Jitter added to the normal-equations matrix on the single retry.
pub const DESIGN_JITTER: f64 = 1e-10;

/// Smallest admissible ratio of a squared Cholesky pivot to its diagonal
/// entry; anything below means a column is numerically a combination of the
/// preceding ones.
const PIVOT_RATIO: f64 = 1e-8;

fn factor_checked(a: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let chol = Cholesky::new(a.clone())?;
    let l = chol.l_dirty();
    let ok = (0..a.nrows()).all(|k| {
        let d = a[(k, k)];
        d > 0.0 && l[(k, k)] * l[(k, k)] >= PIVOT_RATIO * d
    });
    ok.then_some(chol)
}

/// Cholesky of a symmetric PSD matrix; on failure retries once with
/// `jitter * I`, then reports a degenerate design.
pub fn cholesky_with_jitter(a: &DMatrix<f64>, jitter: f64) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = factor_checked(a) {
        return Ok(c);
    }
    let n = a.nrows();
    let jittered = a + DMatrix::<f64>::identity(n, n) * jitter;
    factor_checked(&jittered).ok_or(Error::DegenerateDesign)
}

/// Row-weighted mean and covariance (normalized by the total weight).
pub fn weighted_moments(x: &DMatrix<f64>, w: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let p = x.ncols();
    let total: f64 = w.iter().sum();
    let mut mean = DVector::<f64>::zeros(p);
    for (i, &wi) in w.iter().enumerate() {
        if wi != 0.0 {
            for j in 0..p {
                mean[j] += wi * x[(i, j)];
            }
        }
    }
    mean /= total;
    let mut cov = DMatrix::<f64>::zeros(p, p);
    for (i, &wi) in w.iter().enumerate() {
        if wi == 0.0 {
            continue;
        }
        for a in 0..p {
            let da = x[(i, a)] - mean[a];
            for b in a..p {
                cov[(a, b)] += wi * da * (x[(i, b)] - mean[b]);
            }
        }
    }
    for a in 0..p {
        for b in a..p {
            let v = cov[(a, b)] / total;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    (mean, cov)
}
