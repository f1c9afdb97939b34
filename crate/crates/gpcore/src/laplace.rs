//! Laplace (Gaussian) approximation for non-Gaussian likelihoods: Newton
//! mode finding, approximate marginal likelihood with gradients, and
//! predictions.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{GpError, Result};
use crate::exact::Prediction;
use crate::linalg;
use crate::model::{Dataset, GPModel};

pub struct LaplaceState {
    /// Posterior mode of the latent values.
    pub f_hat: DVector<f64>,
    /// Negative log-likelihood curvature at the mode (W diagonal).
    pub w_diag: DVector<f64>,
    /// Gradient of the log likelihood at the mode; equals K^{-1} f_hat.
    pub grad_ll: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// 0.5 log |I + W^{1/2} K W^{1/2}|.
    pub half_log_det_b: f64,
    /// Prior covariance factorization (with jitter).
    pub k_chol: Cholesky<f64, Dyn>,
    pub k: DMatrix<f64>,
    /// Posterior covariance (K^{-1} + W)^{-1}.
    pub sigma: DMatrix<f64>,
    pub jitter_used: f64,
}

pub fn laplace_fit(model: &GPModel, data: &Dataset) -> Result<LaplaceState> {
    model.validate(data)?;
    let n = data.n();
    // total_train_cov already carries the model jitter; escalation only
    // kicks in when K itself fails to factor
    let mut k = model.total_train_cov(data)?.to_dense();
    let (k_chol, jitter_used) = linalg::chol_with_jitter(&k, 0.0)?;
    if jitter_used > 0.0 {
        for i in 0..n {
            k[(i, i)] += jitter_used;
        }
    }
    let lik = &model.likelihood;

    // iterate on the pair (f, a) with a = K^{-1} f maintained by
    // construction; every objective evaluation is then K^{-1}-free:
    // psi(f) = log p(y|f) - (1/2) f'a
    let mut f = DVector::zeros(n);
    let mut a = DVector::zeros(n);
    let mut obj = lik.ll(&f, &data.obs)?;
    let mut converged = false;
    let mut iterations = 0;
    let max_iter = 100;
    // after the nominal tolerances are met, polish with a few more full
    // Newton steps so the mode is accurate enough for finite-difference
    // checks of the evidence gradient
    let mut polishing = false;
    let mut polish_left = 4;

    for it in 0..max_iter {
        iterations = it + 1;
        let w = -lik.llg(&f, &data.obs, 2)?;
        let g1 = lik.llg(&f, &data.obs, 1)?;
        let (f_prop, a_prop) = if w.iter().all(|&wi| wi >= 0.0) {
            // stabilized W^{1/2} form (R&W Algorithm 3.1)
            let sw = w.map(|wi| wi.sqrt());
            let mut b = DMatrix::identity(n, n);
            for i in 0..n {
                for j in 0..n {
                    b[(i, j)] += sw[i] * k[(i, j)] * sw[j];
                }
            }
            let (b_chol, _) = linalg::chol_with_jitter(&b, 0.0)?;
            let bvec = w.component_mul(&f) + &g1;
            let kb = &k * &bvec;
            let swkb = sw.component_mul(&kb);
            let a_new = &bvec - sw.component_mul(&b_chol.solve(&swkb));
            (&k * &a_new, a_new)
        } else {
            // non-log-concave: f_new = (K^{-1} + W + lambda I)^{-1} b with
            // b = (W + lambda) f + grad ll, solved through
            // L (I + L' D L)^{-1} L' b so K is never inverted
            let l_mat = k_chol.l();
            let mut lambda = 0.0_f64;
            loop {
                let d = w.map(|wi| wi + lambda);
                let dl = DMatrix::from_fn(n, n, |i, j| d[i] * l_mat[(i, j)]);
                let mut m0 = l_mat.transpose() * dl;
                for i in 0..n {
                    m0[(i, i)] += 1.0;
                }
                linalg::symmetrize(&mut m0);
                if let Some(m_chol) = Cholesky::new(m0) {
                    let b = d.component_mul(&f) + &g1;
                    let f_new = &l_mat * m_chol.solve(&(l_mat.transpose() * &b));
                    let a_new = &b - d.component_mul(&f_new);
                    break (f_new, a_new);
                }
                lambda = if lambda == 0.0 { 1e-10 } else { lambda * 2.0 };
                if lambda > 1e10 {
                    return Err(GpError::numerical(
                        "Levenberg shift exhausted in Laplace Newton step",
                    ));
                }
            }
        };

        // step halving on the objective; a blends linearly with f
        let df = &f_prop - &f;
        let da = &a_prop - &a;
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..20 {
            let fc = &f + &df * step;
            let ac = &a + &da * step;
            let cand_obj = lik.ll(&fc, &data.obs)? - 0.5 * fc.dot(&ac);
            if cand_obj >= obj - 1e-12 || polishing {
                accepted = Some((fc, ac, cand_obj));
                break;
            }
            step *= 0.5;
        }
        let (f_new, a_new, new_obj) = match accepted {
            Some(v) => v,
            None => break, // no ascent possible; treat current point as the mode
        };
        let delta_f = (&f_new - &f).amax();
        let delta_obj = (new_obj - obj).abs();
        f = f_new;
        a = a_new;
        obj = new_obj;
        if polishing {
            polish_left -= 1;
            if delta_f < 1e-13 || polish_left == 0 {
                break;
            }
        } else if delta_obj < 1e-10 && delta_f < 1e-8 {
            converged = true;
            if delta_f < 1e-13 {
                break;
            }
            polishing = true;
        }
    }

    let w_diag = -lik.llg(&f, &data.obs, 2)?;
    let grad_ll = lik.llg(&f, &data.obs, 1)?;
    let state = finish_state(&k, k_chol, f, w_diag, grad_ll, converged, iterations, jitter_used)?;
    if !converged {
        return Err(GpError::NoConvergence(format!(
            "Laplace Newton did not converge in {max_iter} iterations \
             (last objective {obj:.6e}, stationarity {:.2e})",
            stationarity_residual(&state)
        )));
    }
    Ok(state)
}

#[allow(clippy::too_many_arguments)]
fn finish_state(
    k: &DMatrix<f64>,
    k_chol: Cholesky<f64, Dyn>,
    f_hat: DVector<f64>,
    w_diag: DVector<f64>,
    grad_ll: DVector<f64>,
    converged: bool,
    iterations: usize,
    jitter_used: f64,
) -> Result<LaplaceState> {
    let n = f_hat.len();
    let (half_log_det_b, sigma) = if w_diag.iter().all(|&wi| wi >= 0.0) {
        let sw = w_diag.map(|wi| wi.sqrt());
        let mut b = DMatrix::identity(n, n);
        for i in 0..n {
            for j in 0..n {
                b[(i, j)] += sw[i] * k[(i, j)] * sw[j];
            }
        }
        let (b_chol, _) = linalg::chol_with_jitter(&b, 0.0)?;
        // Sigma = K - K W^{1/2} B^{-1} W^{1/2} K
        let swk = DMatrix::from_fn(n, n, |i, j| sw[i] * k[(i, j)]);
        let mut sigma = k - swk.transpose() * b_chol.solve(&swk);
        linalg::symmetrize(&mut sigma);
        (linalg::half_log_det(&b_chol), sigma)
    } else {
        // eigendecomposition fallback on M = I + L' W L, for which
        // |B| = |M| and Sigma = L M^{-1} L'
        let l_mat = k_chol.l();
        let wl = DMatrix::from_fn(n, n, |i, j| w_diag[i] * l_mat[(i, j)]);
        let mut m0 = l_mat.transpose() * wl;
        for i in 0..n {
            m0[(i, i)] += 1.0;
        }
        linalg::symmetrize(&mut m0);
        let eig = nalgebra::SymmetricEigen::new(m0);
        if eig.eigenvalues.iter().any(|&e| e <= 0.0) {
            return Err(GpError::numerical(
                "posterior precision indefinite at the Laplace mode",
            ));
        }
        let log_det_b: f64 = eig.eigenvalues.iter().map(|e| e.ln()).sum();
        let mut m_inv = DMatrix::zeros(n, n);
        for (idx, val) in eig.eigenvalues.iter().enumerate() {
            let v = eig.eigenvectors.column(idx);
            m_inv += v * v.transpose() / *val;
        }
        let mut sigma = &l_mat * m_inv * l_mat.transpose();
        linalg::symmetrize(&mut sigma);
        (0.5 * log_det_b, sigma)
    };
    Ok(LaplaceState {
        f_hat,
        w_diag,
        grad_ll,
        converged,
        iterations,
        half_log_det_b,
        k_chol,
        k: k.clone(),
        sigma,
        jitter_used,
    })
}

/// Max-norm of K grad_ll - f_hat; zero at an exact mode.
pub fn stationarity_residual(state: &LaplaceState) -> f64 {
    (&state.k * &state.grad_ll - &state.f_hat).amax()
}

impl LaplaceState {
    /// R = (K + W^{-1})^{-1}, computed as W - W Sigma W to avoid K^{-1}
    /// round-off on near-singular priors.
    pub fn r_matrix(&self) -> DMatrix<f64> {
        let n = self.f_hat.len();
        let mut r = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                r[(i, j)] = -self.w_diag[i] * self.sigma[(i, j)] * self.w_diag[j];
            }
            r[(i, i)] += self.w_diag[i];
        }
        r
    }
}

/// Approximate log marginal likelihood at the mode:
/// log p(y|f) - (1/2) f' K^{-1} f - (1/2) log|B|. The Gaussian-likelihood
/// case reproduces the exact evidence.
pub fn laplace_lml(state: &LaplaceState, model: &GPModel, data: &Dataset) -> Result<f64> {
    let ll = model.likelihood.ll(&state.f_hat, &data.obs)?;
    Ok(ll - 0.5 * state.f_hat.dot(&state.grad_ll) - state.half_log_det_b)
}

/// Gradient of the Laplace evidence w.r.t. log kernel parameters followed by
/// log likelihood parameters (packing order), including the implicit
/// dependence of the mode on the parameters.
pub fn laplace_lml_grad(state: &LaplaceState, model: &GPModel, data: &Dataset) -> Result<Vec<f64>> {
    let n = data.n();
    let x = data.x_matrix();
    let a = &state.grad_ll; // K^{-1} f_hat
    let r = state.r_matrix();
    let g3 = model.likelihood.llg(&state.f_hat, &data.obs, 3)?;
    // dlogZ/df_hat_i = (1/2) Sigma_ii llg3_i
    let s2 = DVector::from_fn(n, |i, _| 0.5 * state.sigma[(i, i)] * g3[i]);

    let mut grads = Vec::new();
    for dk in model.train_cov_grads(&x)? {
        let explicit = 0.5 * a.dot(&(&dk * a)) - 0.5 * (&r * &dk).trace();
        let b = &dk * a;
        let s3 = &b - &state.k * (&r * &b);
        grads.push(explicit + s2.dot(&s3));
    }
    for (dlp, mixed_df, mixed_dff) in model.likelihood.llg_param(&state.f_hat, &data.obs)? {
        // dW/dlog phi = -mixed_dff
        let explicit = dlp.sum() + 0.5 * (0..n).map(|i| state.sigma[(i, i)] * mixed_dff[i]).sum::<f64>();
        let b = &state.k * &mixed_df;
        let s3 = &b - &state.k * (&r * &b);
        grads.push(explicit + s2.dot(&s3));
    }
    Ok(grads)
}

/// Latent and observation predictions at `xt`.
pub fn laplace_predict(
    state: &LaplaceState,
    model: &GPModel,
    data: &Dataset,
    xt: &DMatrix<f64>,
    yt: Option<&DVector<f64>>,
    yt_aux: Option<&crate::likelihoods::ObservationData>,
    predcf: Option<&[usize]>,
) -> Result<Prediction> {
    let x = data.x_matrix();
    let k_star = model.cross_cov_of(&x, xt, predcf)?;
    let mean = k_star.transpose() * &state.grad_ll;
    let prior_diag = model.diag_cov_of(xt, predcf)?;
    let r = state.r_matrix();
    let rks = &r * &k_star;
    let var = DVector::from_fn(xt.nrows(), |i, _| {
        (prior_diag[i] - k_star.column(i).dot(&rks.column(i))).max(0.0)
    });
    observation_prediction(model, mean, var, xt.nrows(), yt, yt_aux)
}

/// Pushes latent means/variances through the observation model.
pub(crate) fn observation_prediction(
    model: &GPModel,
    mean: DVector<f64>,
    var: DVector<f64>,
    nt: usize,
    yt: Option<&DVector<f64>>,
    yt_aux: Option<&crate::likelihoods::ObservationData>,
) -> Result<Prediction> {
    use crate::likelihoods::ObsPoint;
    let mut ey = DVector::zeros(nt);
    let mut vary = DVector::zeros(nt);
    let mut lp = yt.map(|_| DVector::zeros(nt));
    for i in 0..nt {
        let point = match (yt, yt_aux) {
            (_, Some(aux)) => aux.point(i),
            (Some(t), None) => ObsPoint::target(t[i]),
            (None, None) => ObsPoint::latent_only(),
        };
        let point = match yt {
            Some(t) => ObsPoint { y: Some(t[i]), ..point },
            None => ObsPoint { y: None, ..point },
        };
        let (e, v, l) = model.likelihood.predict(mean[i], var[i], &point)?;
        ey[i] = e;
        vary[i] = v;
        if let (Some(lp), Some(li)) = (lp.as_mut(), l) {
            lp[i] = li;
        }
    }
    Ok(Prediction { mean, var, ey, vary, lpyt: lp })
}
