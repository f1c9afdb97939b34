//! Gauss–Hermite quadrature for one-dimensional integrals against a Gaussian.

use std::collections::HashMap;
use std::sync::Mutex;

use nalgebra::{DMatrix, SymmetricEigen};
use once_cell::sync::Lazy;

/// Default node count for likelihood integrals.
pub const DEFAULT_NODES: usize = 31;

static RULES: Lazy<Mutex<HashMap<usize, GaussHermite>>> = Lazy::new(|| Mutex::new(HashMap::new()));

/// Physicists' Gauss–Hermite rule: sum_k w_k g(t_k) ~ int g(t) exp(-t^2) dt.
#[derive(Clone, Debug)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Golub–Welsch construction from the Jacobi matrix of the Hermite
    /// recurrence (off-diagonal sqrt(k/2)).
    fn build(n: usize) -> Self {
        assert!(n >= 1);
        let mut j = DMatrix::<f64>::zeros(n, n);
        for k in 1..n {
            let b = (k as f64 / 2.0).sqrt();
            j[(k - 1, k)] = b;
            j[(k, k - 1)] = b;
        }
        let eig = SymmetricEigen::new(j);
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let node = eig.eigenvalues[i];
                let v0 = eig.eigenvectors[(0, i)];
                let weight = std::f64::consts::PI.sqrt() * v0 * v0;
                (node, weight)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        GaussHermite {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        }
    }

    pub fn with_nodes(n: usize) -> GaussHermite {
        let mut cache = RULES.lock().unwrap();
        cache.entry(n).or_insert_with(|| GaussHermite::build(n)).clone()
    }
}

/// E[g(f)] for f ~ N(mean, var), by an affine change of variables.
pub fn gauss_hermite_expect<F>(mean: f64, var: f64, n_nodes: usize, mut g: F) -> f64
where
    F: FnMut(f64) -> f64,
{
    if var <= 0.0 {
        return g(mean);
    }
    let rule = GaussHermite::with_nodes(n_nodes);
    let scale = (2.0 * var).sqrt();
    let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
    rule.nodes
        .iter()
        .zip(&rule.weights)
        .map(|(&t, &w)| w * g(mean + scale * t))
        .sum::<f64>()
        * inv_sqrt_pi
}

/// log E[exp(h(f))] for f ~ N(mean, var), evaluated in log space.
pub fn gauss_hermite_log_expect<F>(mean: f64, var: f64, n_nodes: usize, mut log_g: F) -> f64
where
    F: FnMut(f64) -> f64,
{
    if var <= 0.0 {
        return log_g(mean);
    }
    let rule = GaussHermite::with_nodes(n_nodes);
    let scale = (2.0 * var).sqrt();
    let terms: Vec<f64> = rule
        .nodes
        .iter()
        .zip(&rule.weights)
        .map(|(&t, &w)| w.ln() + log_g(mean + scale * t))
        .collect();
    log_sum_exp(&terms) - 0.5 * std::f64::consts::PI.ln()
}

/// Zeroth/first/second moments of exp(log_lik(f)) * N(f | mean, var).
///
/// Returns (log Z, tilted mean, tilted variance). A first pass centered at
/// the Gaussian factor locates the tilted bulk; a second pass recentered
/// there integrates against it, so skewed or shifted integrands (outliers,
/// heavy tails) converge at the default node count. Everything is
/// accumulated in log space so small likelihood values do not underflow.
pub fn tilted_moments<F>(mean: f64, var: f64, n_nodes: usize, log_lik: F) -> (f64, f64, f64)
where
    F: FnMut(f64) -> f64,
{
    tilted_moments_opts(mean, var, n_nodes, false, log_lik)
}

/// Variant with a policy switch for likelihoods with polynomial tails.
///
/// When `heavy_tailed` is set the reference Gaussian is never narrower than
/// the cavity: a narrower rule cannot hold a polynomially decaying
/// integrand, its outer nodes dominate spuriously.
pub fn tilted_moments_opts<F>(
    mean: f64,
    var: f64,
    n_nodes: usize,
    heavy_tailed: bool,
    mut log_lik: F,
) -> (f64, f64, f64)
where
    F: FnMut(f64) -> f64,
{
    let floor = if heavy_tailed { var } else { 1e-12 * var };
    let (_, m0, v0) = tilted_pass(mean, var, mean, var, n_nodes, &mut log_lik);
    // widen so the reference does not truncate the tilted tails, then refine
    // once with the improved location estimate
    let (_, m1, v1) = tilted_pass(mean, var, m0, (1.5 * v0).max(floor), n_nodes, &mut log_lik);
    let (log_z, m, v) = tilted_pass(mean, var, m1, (1.5 * v1).max(floor), n_nodes, &mut log_lik);
    (log_z, m, v)
}

/// One Gauss-Hermite pass over exp(log_lik(f)) N(f | mean, var), with nodes
/// placed for a reference Gaussian N(center, spread).
fn tilted_pass<F>(
    mean: f64,
    var: f64,
    center: f64,
    spread: f64,
    n_nodes: usize,
    log_lik: &mut F,
) -> (f64, f64, f64)
where
    F: FnMut(f64) -> f64,
{
    let rule = GaussHermite::with_nodes(n_nodes);
    let scale = (2.0 * spread).sqrt();
    let n = rule.nodes.len();
    let mut logs = Vec::with_capacity(n);
    let mut fs = Vec::with_capacity(n);
    for (&t, &w) in rule.nodes.iter().zip(&rule.weights) {
        let f = center + scale * t;
        // integrand / reference weight: exp(t^2) * N(f|mean,var) * lik(f)
        let log_ref = -0.5 * ((f - mean).powi(2) / var - 2.0 * t * t) ;
        logs.push(w.ln() + log_lik(f) + log_ref);
        fs.push(f);
    }
    let log_total = log_sum_exp(&logs);
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    for i in 0..n {
        let p = (logs[i] - log_total).exp();
        m1 += p * fs[i];
        m2 += p * fs[i] * fs[i];
    }
    // constants: sqrt(2 spread) from df, 1/sqrt(2 pi var) from the Gaussian
    let log_z = log_total + (2.0 * spread).sqrt().ln()
        - 0.5 * (2.0 * std::f64::consts::PI * var).ln();
    (log_z, m1, (m2 - m1 * m1).max(0.0))
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm_logpdf;
    use approx::assert_relative_eq;

    #[test]
    fn hermite_integrates_polynomials_exactly() {
        // E[f^2] = var and E[f^4] = 3 var^2 under N(0, var)
        let v = 1.7;
        assert_relative_eq!(gauss_hermite_expect(0.0, v, 11, |f| f * f), v, max_relative = 1e-12);
        assert_relative_eq!(
            gauss_hermite_expect(0.0, v, 11, |f| f.powi(4)),
            3.0 * v * v,
            max_relative = 1e-12
        );
    }

    #[test]
    fn tilted_moments_of_gaussian_product_match_conjugate_formulas() {
        // N(y | f, s2) * N(f | m, v) has closed-form moments
        let (y, s2, m, v) = (0.4, 0.8, -0.3, 1.5);
        let (log_z, tm, tv) = tilted_moments(m, v, 45, |f| norm_logpdf(y, f, s2));
        let var_post = 1.0 / (1.0 / v + 1.0 / s2);
        let mean_post = var_post * (m / v + y / s2);
        assert_relative_eq!(log_z, norm_logpdf(y, m, v + s2), max_relative = 1e-10);
        assert_relative_eq!(tm, mean_post, max_relative = 1e-8);
        assert_relative_eq!(tv, var_post, max_relative = 1e-8);
    }

    #[test]
    fn doubling_nodes_is_stable() {
        let a = gauss_hermite_log_expect(0.1, 0.9, 31, |f| -f.exp());
        let b = gauss_hermite_log_expect(0.1, 0.9, 62, |f| -f.exp());
        assert!((a - b).abs() < 1e-8);
    }
}

