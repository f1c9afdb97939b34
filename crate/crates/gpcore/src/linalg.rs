//! Small dense linear-algebra helpers used by every inference backend.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{GpError, Result};

/// Enforce symmetry as (A + A^T)/2.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Cholesky factorization with jitter escalation.
///
/// Starts from `base_jitter` added to the diagonal. On failure retries with
/// `max(1e-10, 10 * current)` for at most five escalations. Returns the
/// factorization together with the jitter that was actually used.
pub fn chol_with_jitter(
    a: &DMatrix<f64>,
    base_jitter: f64,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = a.nrows();
    let mut jitter = base_jitter;
    for attempt in 0..=5 {
        let mut m = a.clone();
        if jitter > 0.0 {
            for i in 0..n {
                m[(i, i)] += jitter;
            }
        }
        if let Some(chol) = Cholesky::new(m) {
            return Ok((chol, jitter));
        }
        if attempt == 5 {
            break;
        }
        jitter = (10.0 * jitter).max(1e-10);
    }
    Err(GpError::Factorization(format!(
        "Cholesky failed for {n}x{n} matrix after jitter escalation to {jitter:e}"
    )))
}

/// Sum of log-diagonal entries of a Cholesky factor, i.e. 0.5 * log|A|.
pub fn half_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum()
}

/// Dense inverse through an existing Cholesky factorization.
pub fn chol_inverse(chol: &Cholesky<f64, Dyn>) -> DMatrix<f64> {
    chol.inverse()
}

/// Quadratic form v^T A^{-1} v through a Cholesky factorization.
pub fn inv_quad(chol: &Cholesky<f64, Dyn>, v: &DVector<f64>) -> f64 {
    v.dot(&chol.solve(v))
}

/// log N(x | mean, cov) for a dense covariance.
pub fn mvn_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let n = x.len() as f64;
    let (chol, _) = chol_with_jitter(cov, 0.0)?;
    let d = x - mean;
    Ok(-0.5 * n * LN_2PI - half_log_det(&chol) - 0.5 * inv_quad(&chol, &d))
}

/// Central finite difference of a scalar function along each coordinate.
pub fn central_difference<F>(f: &mut F, x: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut grad = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        let h = step * (1.0 + x[j].abs());
        xp[j] = x[j] + h;
        let fp = f(&xp)?;
        xp[j] = x[j] - h;
        let fm = f(&xp)?;
        xp[j] = x[j];
        grad[j] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// log N(x | mu, s2) for a scalar Gaussian.
pub fn norm_logpdf(x: f64, mu: f64, s2: f64) -> f64 {
    let d = x - mu;
    -0.5 * (LN_2PI + s2.ln()) - 0.5 * d * d / s2
}
