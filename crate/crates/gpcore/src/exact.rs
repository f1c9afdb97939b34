//! Closed-form inference for the Gaussian likelihood: conditional posterior,
//! predictions, log marginal likelihood with gradients, analytic
//! leave-one-out, and the explicit-basis mean-function variants.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{GpError, Result};
use crate::linalg::{self, norm_logpdf, LN_2PI};
use crate::model::{Backend, Dataset, GPModel};

/// Posterior state for the Gaussian-likelihood model.
pub struct ExactState {
    /// Cholesky of K_y = K + sigma^2 I (+ jitter).
    pub chol: Cholesky<f64, Dyn>,
    /// K_y^{-1} y.
    pub alpha: DVector<f64>,
    pub jitter_used: f64,
    /// Mean-basis auxiliaries when the model has an explicit mean.
    pub mean_aux: Option<MeanAux>,
}

/// Cached quantities for the explicit-basis mean function.
pub struct MeanAux {
    /// m x n basis matrix over the training inputs.
    pub h: DMatrix<f64>,
    /// H K_y^{-1} (m x n).
    pub h_kinv: DMatrix<f64>,
    /// Posterior weight mean (beta-bar, or its vague limit).
    pub beta_bar: DVector<f64>,
    /// Cholesky of A = B^{-1} + H K_y^{-1} H^T (or A_v without B^{-1}).
    pub a_chol: Cholesky<f64, Dyn>,
}

/// Latent and observation predictions at a set of inputs.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
    pub ey: DVector<f64>,
    pub vary: DVector<f64>,
    /// Per-point log predictive density, when targets were supplied.
    pub lpyt: Option<DVector<f64>>,
}

fn noise_sigma2(model: &GPModel) -> f64 {
    match &model.likelihood {
        crate::likelihoods::LikelihoodSpec::Gaussian { sigma2 } => sigma2.value,
        _ => unreachable!("exact backend is validated to have a gaussian likelihood"),
    }
}

fn ky_matrix(model: &GPModel, data: &Dataset) -> Result<DMatrix<f64>> {
    let mut k = model.total_train_cov(data)?.to_dense();
    let s2 = noise_sigma2(model);
    for i in 0..k.nrows() {
        k[(i, i)] += s2;
    }
    Ok(k)
}

pub fn exact_fit(model: &GPModel, data: &Dataset) -> Result<ExactState> {
    model.validate(data)?;
    if model.backend != Backend::Exact {
        return Err(GpError::input("exact_fit requires the exact backend"));
    }
    let ky = ky_matrix(model, data)?;
    let (chol, jitter_used) = linalg::chol_with_jitter(&ky, 0.0)?;
    let y = data.y_vector();
    let alpha = chol.solve(&y);
    let mean_aux = match &model.mean {
        None => None,
        Some(mean) => {
            let x = data.x_matrix();
            let h = mean.h_matrix(&x);
            let h_kinv = chol.solve(&h.transpose()).transpose(); // m x n
            let mut a = &h_kinv * h.transpose(); // H K^{-1} H^T
            if !mean.vague {
                let (b_chol, _) = linalg::chol_with_jitter(&mean.cov_matrix(), 0.0)?;
                a += b_chol.inverse();
            }
            linalg::symmetrize(&mut a);
            let a_chol = Cholesky::new(a).ok_or_else(|| {
                GpError::Factorization(
                    "basis normal-equations matrix is singular (rank-deficient H?)".into(),
                )
            })?;
            let mut rhs = &h_kinv * &y;
            if !mean.vague {
                let (b_chol, _) = linalg::chol_with_jitter(&mean.cov_matrix(), 0.0)?;
                rhs += b_chol.solve(&mean.b_vector());
            }
            let beta_bar = a_chol.solve(&rhs);
            Some(MeanAux { h, h_kinv, beta_bar, a_chol })
        }
    };
    Ok(ExactState { chol, alpha, jitter_used, mean_aux })
}

/// Predictive distribution at `xt`; optional component selection for
/// additive models and optional targets for log predictive densities.
pub fn exact_predict(
    state: &ExactState,
    model: &GPModel,
    data: &Dataset,
    xt: &DMatrix<f64>,
    yt: Option<&DVector<f64>>,
    predcf: Option<&[usize]>,
) -> Result<Prediction> {
    if xt.ncols() != data.dim() {
        return Err(GpError::input(format!(
            "prediction inputs have dimension {}, expected {}",
            xt.ncols(),
            data.dim()
        )));
    }
    if model.mean.is_some() && predcf.is_some() {
        return Err(GpError::input("component selection is not defined with a mean basis"));
    }
    let x = data.x_matrix();
    let k_star = model.cross_cov_of(&x, xt, predcf)?; // n x nt
    let mut mean = k_star.transpose() * &state.alpha;
    let prior_diag = model.diag_cov_of(xt, predcf)?;
    let kinv_kstar = state.chol.solve(&k_star);
    let mut var = DVector::from_fn(xt.nrows(), |i, _| {
        (prior_diag[i] - k_star.column(i).dot(&kinv_kstar.column(i))).max(0.0)
    });

    if let (Some(aux), Some(mean_spec)) = (&state.mean_aux, &model.mean) {
        // R = H_* - H K_y^{-1} K_*
        let h_star = mean_spec.h_matrix(xt);
        let r = &h_star - &aux.h_kinv * &k_star;
        mean += r.transpose() * &aux.beta_bar;
        let a_inv_r = aux.a_chol.solve(&r);
        for i in 0..xt.nrows() {
            var[i] += r.column(i).dot(&a_inv_r.column(i));
        }
    }

    let s2 = noise_sigma2(model);
    let ey = mean.clone();
    let vary = var.map(|v| v + s2);
    let lpyt = yt.map(|targets| {
        DVector::from_fn(targets.len(), |i, _| norm_logpdf(targets[i], mean[i], var[i] + s2))
    });
    Ok(Prediction { mean, var, ey, vary, lpyt })
}

/// Full latent predictive covariance at `xt` (optional joint variant).
pub fn exact_predict_full_cov(
    state: &ExactState,
    model: &GPModel,
    data: &Dataset,
    xt: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let x = data.x_matrix();
    let k_star = model.cross_cov_of(&x, xt, None)?;
    let k_tt = model.cross_cov_of(xt, xt, None)?;
    let mut cov = &k_tt - k_star.transpose() * state.chol.solve(&k_star);
    if let (Some(aux), Some(mean_spec)) = (&state.mean_aux, &model.mean) {
        let h_star = mean_spec.h_matrix(xt);
        let r = &h_star - &aux.h_kinv * &k_star;
        cov += r.transpose() * aux.a_chol.solve(&r);
    }
    linalg::symmetrize(&mut cov);
    Ok(cov)
}

/// Log marginal likelihood; dispatches to the mean-function form when the
/// model has an explicit basis.
pub fn exact_lml(state: &ExactState, model: &GPModel, data: &Dataset) -> Result<f64> {
    match &model.mean {
        None => {
            let y = data.y_vector();
            let n = data.n() as f64;
            Ok(-0.5 * y.dot(&state.alpha) - linalg::half_log_det(&state.chol) - 0.5 * n * LN_2PI)
        }
        Some(_) => meanfn_lml(state, model, data),
    }
}

/// Marginal likelihood with an explicit basis: exact-prior or vague form.
pub fn meanfn_lml(state: &ExactState, model: &GPModel, data: &Dataset) -> Result<f64> {
    let mean_spec = model
        .mean
        .as_ref()
        .ok_or_else(|| GpError::input("meanfn_lml requires a mean basis"))?;
    let aux = state.mean_aux.as_ref().expect("fitted with mean basis");
    let y = data.y_vector();
    let n = data.n() as f64;
    let m = mean_spec.len() as f64;
    if mean_spec.vague {
        // -(1/2) y' (K^{-1} - C) y - (1/2) log|K_y| - (1/2) log|A_v| - (n-m)/2 log 2pi
        let hky = &aux.h_kinv * &y; // m-vector
        let quad_c = hky.dot(&aux.a_chol.solve(&hky));
        Ok(-0.5 * y.dot(&state.alpha) + 0.5 * quad_c
            - linalg::half_log_det(&state.chol)
            - linalg::half_log_det(&aux.a_chol)
            - 0.5 * (n - m) * LN_2PI)
    } else {
        // N = K_y + H' B H, M = H' b - y
        let ky = ky_matrix(model, data)?;
        let b_mat = mean_spec.cov_matrix();
        let n_mat = &ky + aux.h.transpose() * &b_mat * &aux.h;
        let (n_chol, _) = linalg::chol_with_jitter(&n_mat, 0.0)?;
        let m_vec = aux.h.transpose() * mean_spec.b_vector() - &y;
        let (b_chol, _) = linalg::chol_with_jitter(&b_mat, 0.0)?;
        Ok(-0.5 * linalg::inv_quad(&n_chol, &m_vec)
            - linalg::half_log_det(&state.chol)
            - linalg::half_log_det(&b_chol)
            - linalg::half_log_det(&aux.a_chol)
            - 0.5 * n * LN_2PI)
    }
}

/// Gradient of the log marginal likelihood w.r.t. log kernel parameters
/// followed by the log noise variance (packing order).
pub fn exact_lml_grad(state: &ExactState, model: &GPModel, data: &Dataset) -> Result<Vec<f64>> {
    let x = data.x_matrix();
    let n = data.n();
    let mut cov_grads = model.train_cov_grads(&x)?;
    if model.likelihood.n_free_params() > 0 {
        let s2 = noise_sigma2(model);
        let mut dn = DMatrix::zeros(n, n);
        for i in 0..n {
            dn[(i, i)] = s2;
        }
        cov_grads.push(dn);
    }
    match &model.mean {
        None => {
            let ky_inv = state.chol.inverse();
            let alpha = &state.alpha;
            Ok(cov_grads
                .iter()
                .map(|dk| {
                    0.5 * (alpha.transpose() * dk * alpha)[(0, 0)] - 0.5 * (&ky_inv * dk).trace()
                })
                .collect())
        }
        Some(mean_spec) => {
            let aux = state.mean_aux.as_ref().expect("fitted with mean basis");
            let y = data.y_vector();
            let ky_inv = state.chol.inverse();
            if mean_spec.vague {
                // G = H' A_v^{-1} H K_y^{-1} y
                let hky = &aux.h_kinv * &y;
                let g = aux.h.transpose() * aux.a_chol.solve(&hky);
                let kinv_y = &state.alpha;
                let kinv_g = state.chol.solve(&g);
                let mut out = Vec::with_capacity(cov_grads.len());
                for dk in &cov_grads {
                    let p_y = dk * kinv_y; // dK K^{-1} y
                    let quad = 0.5 * kinv_y.dot(&p_y) - kinv_g.dot(&p_y)
                        + 0.5 * kinv_g.dot(&(dk * &kinv_g));
                    let tr_k = (&ky_inv * dk).trace();
                    // dA_v = -H K^{-1} dK K^{-1} H'
                    let hk_dk = &aux.h_kinv * dk; // m x n
                    let da = -(&hk_dk * aux.h_kinv.transpose());
                    let tr_a = (aux.a_chol.solve(&da)).trace();
                    out.push(quad - 0.5 * tr_k - 0.5 * tr_a);
                }
                Ok(out)
            } else {
                let ky = ky_matrix(model, data)?;
                let b_mat = mean_spec.cov_matrix();
                let n_mat = &ky + aux.h.transpose() * &b_mat * &aux.h;
                let (n_chol, _) = linalg::chol_with_jitter(&n_mat, 0.0)?;
                let m_vec = aux.h.transpose() * mean_spec.b_vector() - &y;
                let ninv_m = n_chol.solve(&m_vec);
                let mut out = Vec::with_capacity(cov_grads.len());
                for dk in &cov_grads {
                    let quad = 0.5 * ninv_m.dot(&(dk * &ninv_m));
                    let tr_k = (&ky_inv * dk).trace();
                    let hk_dk = &aux.h_kinv * dk;
                    let da = -(&hk_dk * aux.h_kinv.transpose());
                    let tr_a = (aux.a_chol.solve(&da)).trace();
                    out.push(quad - 0.5 * tr_k - 0.5 * tr_a);
                }
                Ok(out)
            }
        }
    }
}

/// Analytic leave-one-out predictive summaries (mu_i, var_i, lpd_i),
/// predicting the observation y_i (noise included).
pub fn exact_loo(state: &ExactState, model: &GPModel, data: &Dataset) -> Result<Vec<(f64, f64, f64)>> {
    if model.mean.is_some() {
        return Err(GpError::unsupported("analytic LOO is not defined with a mean basis"));
    }
    let y = data.y_vector();
    let ky_inv = state.chol.inverse();
    let mut out = Vec::with_capacity(data.n());
    for i in 0..data.n() {
        let gii = ky_inv[(i, i)];
        let mu = y[i] - state.alpha[i] / gii;
        let var = 1.0 / gii;
        out.push((mu, var, norm_logpdf(y[i], mu, var)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{Hyper, KernelKind, KernelSpec};
    use crate::likelihoods::LikelihoodSpec;
    use crate::model::{BasisFn, MeanBasis};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn sexp(m: f64, l: f64) -> KernelSpec {
        KernelSpec::new(KernelKind::Sexp {
            magn_sigma2: Hyper::new(m),
            lengthscales: vec![Hyper::new(l)],
        })
    }

    fn gaussian_model(s2_kernel: f64, l: f64, s2_noise: f64) -> GPModel {
        GPModel::new(
            vec![sexp(s2_kernel, l)],
            LikelihoodSpec::Gaussian { sigma2: Hyper::new(s2_noise) },
            Backend::Exact,
        )
    }

    fn random_data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen_range(-2.0..2.0)]).collect();
        let y: Vec<f64> = x.iter().map(|r| (1.3 * r[0]).sin() + 0.1 * rng.gen::<f64>()).collect();
        Dataset::regression(x, y)
    }

    #[test]
    fn scalar_fit_solves_alpha() {
        // n=1, K=1, sigma2=1, y=2 -> alpha = 1
        let model = gaussian_model(1.0, 1.0, 1.0);
        let data = Dataset::regression(vec![vec![0.0]], vec![2.0]);
        let state = exact_fit(&model, &data).unwrap();
        assert_relative_eq!(state.alpha[0], 1.0, max_relative = 1e-12);
    }

    #[test]
    fn fitted_alpha_satisfies_the_linear_system() {
        let model = gaussian_model(0.8, 1.2, 0.2);
        let data = random_data(10, 1);
        let state = exact_fit(&model, &data).unwrap();
        let ky = ky_matrix(&model, &data).unwrap();
        let resid = (&ky * &state.alpha - data.y_vector()).norm() / data.y_vector().norm();
        assert!(resid < 1e-8);
    }

    #[test]
    fn duplicated_inputs_trigger_jitter_escalation() {
        let model = gaussian_model(1.0, 1.0, 0.0); // zero noise + duplicate rows
        let data = Dataset::regression(vec![vec![0.5], vec![0.5], vec![1.0]], vec![0.1, 0.1, 0.9]);
        let state = exact_fit(&model, &data).unwrap();
        assert!(state.jitter_used > 0.0);
    }

    #[test]
    fn noise_free_prediction_interpolates_training_data() {
        let model = gaussian_model(1.0, 0.9, 0.0);
        let data = random_data(6, 3);
        let state = exact_fit(&model, &data).unwrap();
        assert_eq!(state.jitter_used, 0.0);
        let xt = data.x_matrix();
        let pred = exact_predict(&state, &model, &data, &xt, None, None).unwrap();
        for i in 0..data.n() {
            assert!((pred.mean[i] - data.obs.y[i]).abs() < 1e-10);
            assert!(pred.var[i] < 1e-10);
        }
    }

    #[test]
    fn far_test_points_revert_to_the_prior() {
        let model = gaussian_model(0.7, 0.4, 0.1);
        let data = random_data(8, 5);
        let state = exact_fit(&model, &data).unwrap();
        let xt = DMatrix::from_row_slice(1, 1, &[100.0]);
        let pred = exact_predict(&state, &model, &data, &xt, None, None).unwrap();
        assert!(pred.mean[0].abs() < 1e-6);
        assert_relative_eq!(pred.var[0], 0.7, max_relative = 1e-6);
    }

    #[test]
    fn predictions_match_a_naive_dense_implementation() {
        let model = gaussian_model(0.9, 1.1, 0.15);
        let data = random_data(20, 7);
        let state = exact_fit(&model, &data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xt = DMatrix::from_fn(5, 1, |_, _| rng.gen_range(-2.0..2.0));
        let pred = exact_predict(&state, &model, &data, &xt, None, None).unwrap();

        // naive: mean = Kt' (K + s2 I)^{-1} y; cov = Ktt - Kt' (K+s2)^{-1} Kt
        let x = data.x_matrix();
        let ky = ky_matrix(&model, &data).unwrap();
        let ky_inv = ky.clone().try_inverse().unwrap();
        let kt = model.cross_cov_of(&x, &xt, None).unwrap();
        let ktt = model.cross_cov_of(&xt, &xt, None).unwrap();
        let mean = kt.transpose() * &ky_inv * data.y_vector();
        let cov = &ktt - kt.transpose() * &ky_inv * &kt;
        for i in 0..5 {
            assert!((pred.mean[i] - mean[i]).abs() < 1e-10);
            assert!((pred.var[i] - cov[(i, i)]).abs() < 1e-10);
        }
    }

    #[test]
    fn posterior_variance_never_exceeds_prior_variance() {
        let model = gaussian_model(0.9, 0.8, 0.05);
        let data = random_data(15, 11);
        let state = exact_fit(&model, &data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let xt = DMatrix::from_fn(30, 1, |_, _| rng.gen_range(-3.0..3.0));
        let pred = exact_predict(&state, &model, &data, &xt, None, None).unwrap();
        for i in 0..30 {
            assert!(pred.var[i] <= 0.9 + 1e-12);
        }
    }

    #[test]
    fn scalar_lml_value() {
        // n=1, K=1, sigma2=1, y=0: -(1/2) log(2 pi) - (1/2) log 2
        let model = gaussian_model(1.0, 1.0, 1.0);
        let data = Dataset::regression(vec![vec![0.0]], vec![0.0]);
        let state = exact_fit(&model, &data).unwrap();
        let lml = exact_lml(&state, &model, &data).unwrap();
        let expect = -0.5 * LN_2PI - 0.5 * 2.0f64.ln();
        assert_relative_eq!(lml, expect, max_relative = 1e-12);
        assert!((expect - (-1.2655)).abs() < 1e-4);
    }

    #[test]
    fn lml_gradient_matches_finite_differences() {
        let model = gaussian_model(0.8, 1.3, 0.25);
        let data = random_data(15, 17);
        let state = exact_fit(&model, &data).unwrap();
        let grad = exact_lml_grad(&state, &model, &data).unwrap();
        // pack order: magn, lengthscale, noise
        let fd = fd_lml_grad(&model, &data);
        assert_eq!(grad.len(), 3);
        for (a, f) in grad.iter().zip(&fd) {
            assert_relative_eq!(a, f, max_relative = 1e-6, epsilon = 1e-9);
        }
    }

    fn fd_lml_grad(model: &GPModel, data: &Dataset) -> Vec<f64> {
        let views: Vec<f64> = model
            .kernels
            .iter()
            .flat_map(|k| k.hyper_views().into_iter().flat_map(|v| v.values))
            .chain(model.likelihood.hyper_views().into_iter().flat_map(|v| v.values))
            .collect();
        let h = 1e-6;
        let mut out = Vec::new();
        for j in 0..views.len() {
            let eval = |delta: f64| {
                let mut m2 = model.clone();
                let mut vals = views.clone();
                vals[j] = (views[j].ln() + delta).exp();
                let nk: usize = m2.kernels.iter().map(|k| k.n_free_params()).sum();
                let mut idx = 0;
                for k in &mut m2.kernels {
                    idx += k.set_free_params(&vals[idx..]);
                }
                m2.likelihood.set_free_params(&vals[nk..]);
                let st = exact_fit(&m2, data).unwrap();
                exact_lml(&st, &m2, data).unwrap()
            };
            out.push((eval(h) - eval(-h)) / (2.0 * h));
        }
        out
    }

    #[test]
    fn lml_recomputation_is_consistent_under_noise_doubling() {
        let data = Dataset::regression(vec![vec![0.0], vec![1.0]], vec![0.0, 0.0]);
        let m1 = gaussian_model(1.0, 1.0, 0.5);
        let m2 = gaussian_model(1.0, 1.0, 1.0);
        let l1 = exact_lml(&exact_fit(&m1, &data).unwrap(), &m1, &data).unwrap();
        let l2 = exact_lml(&exact_fit(&m2, &data).unwrap(), &m2, &data).unwrap();
        // with y = 0 only the log-det changes, so doubling noise lowers lml
        assert!(l2 < l1);
    }

    #[test]
    fn lml_is_invariant_to_data_permutation() {
        let model = gaussian_model(0.6, 0.9, 0.2);
        let data = random_data(12, 23);
        let state = exact_fit(&model, &data).unwrap();
        let lml = exact_lml(&state, &model, &data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut idx: Vec<usize> = (0..12).collect();
        idx.shuffle(&mut rng);
        let data2 = Dataset::regression(
            idx.iter().map(|&i| data.x[i].clone()).collect(),
            idx.iter().map(|&i| data.obs.y[i]).collect(),
        );
        let lml2 = exact_lml(&exact_fit(&model, &data2).unwrap(), &model, &data2).unwrap();
        assert!((lml - lml2).abs() < 1e-10);
    }

    #[test]
    fn analytic_loo_matches_brute_force_refits() {
        let model = gaussian_model(0.9, 1.0, 0.3);
        let data = random_data(15, 31);
        let state = exact_fit(&model, &data).unwrap();
        let loo = exact_loo(&state, &model, &data).unwrap();
        let mut lpd_sum_analytic = 0.0;
        let mut lpd_sum_brute = 0.0;
        for i in 0..data.n() {
            let xi: Vec<Vec<f64>> = (0..data.n()).filter(|&j| j != i).map(|j| data.x[j].clone()).collect();
            let yi: Vec<f64> = (0..data.n()).filter(|&j| j != i).map(|j| data.obs.y[j]).collect();
            let d_i = Dataset::regression(xi, yi);
            let st = exact_fit(&model, &d_i).unwrap();
            let xt = DMatrix::from_row_slice(1, 1, &data.x[i]);
            let yt = DVector::from_element(1, data.obs.y[i]);
            let pred = exact_predict(&st, &model, &d_i, &xt, Some(&yt), None).unwrap();
            let (mu, var, lpd) = loo[i];
            assert!((mu - pred.ey[0]).abs() < 1e-8, "mean {} vs {}", mu, pred.ey[0]);
            assert!((var - pred.vary[0]).abs() < 1e-8);
            assert!((lpd - pred.lpyt.as_ref().unwrap()[0]).abs() < 1e-8);
            lpd_sum_analytic += lpd;
            lpd_sum_brute += pred.lpyt.unwrap()[0];
        }
        assert!((lpd_sum_analytic - lpd_sum_brute).abs() < 1e-8);
    }

    #[test]
    fn symmetric_two_point_loo_has_equal_variances() {
        let model = gaussian_model(1.0, 1.0, 0.2);
        let data = Dataset::regression(vec![vec![-0.5], vec![0.5]], vec![1.0, -1.0]);
        let state = exact_fit(&model, &data).unwrap();
        let loo = exact_loo(&state, &model, &data).unwrap();
        assert_relative_eq!(loo[0].1, loo[1].1, max_relative = 1e-12);
    }

    #[test]
    fn independent_points_loo_reverts_to_prior() {
        // far apart points: K effectively diagonal
        let model = gaussian_model(0.8, 0.01, 0.3);
        let data = Dataset::regression(vec![vec![-5.0], vec![0.0], vec![5.0]], vec![0.4, -0.2, 0.9]);
        let state = exact_fit(&model, &data).unwrap();
        for (i, &(mu, var, _)) in exact_loo(&state, &model, &data).unwrap().iter().enumerate() {
            assert!(mu.abs() < 1e-8, "point {i}: mu {mu}");
            assert_relative_eq!(var, 0.8 + 0.3, max_relative = 1e-8);
        }
    }

    // --- mean function tests --------------------------------------------

    fn mean_model(vague: bool, b: Vec<f64>, cov_scale: f64) -> GPModel {
        let mut model = gaussian_model(0.7, 1.0, 0.2);
        let basis = vec![BasisFn::Constant, BasisFn::Linear(0)];
        model.mean = Some(if vague {
            MeanBasis::vague(basis)
        } else {
            let m = basis.len();
            let cov: Vec<Vec<f64>> = (0..m)
                .map(|i| (0..m).map(|j| if i == j { cov_scale } else { 0.0 }).collect())
                .collect();
            MeanBasis::with_prior(basis, b, cov)
        });
        model
    }

    /// Oracle: a GP with mean basis h, prior N(b, B) equals a zero-mean GP
    /// with kernel k + h^T B h on the residual y - h^T b.
    fn augmented_oracle(
        model: &GPModel,
        data: &Dataset,
        xt: &DMatrix<f64>,
    ) -> (f64, DVector<f64>, DVector<f64>) {
        let mean_spec = model.mean.as_ref().unwrap();
        let b_mat = mean_spec.cov_matrix();
        let b_vec = mean_spec.b_vector();
        let x = data.x_matrix();
        let h = mean_spec.h_matrix(&x);
        let h_t = mean_spec.h_matrix(xt);
        let shift = h.transpose() * &b_vec;
        let y_shift = data.y_vector() - &shift;

        let base = model.total_train_cov(data).unwrap().to_dense();
        let ky = {
            let mut k = &base + h.transpose() * &b_mat * &h;
            let s2 = noise_sigma2(model);
            for i in 0..k.nrows() {
                k[(i, i)] += s2;
            }
            k
        };
        let ky_inv = ky.clone().try_inverse().unwrap();
        let n = data.n() as f64;
        let lml = -0.5 * y_shift.dot(&(&ky_inv * &y_shift))
            - 0.5 * ky.determinant().ln()
            - 0.5 * n * LN_2PI;
        let kt = model.cross_cov_of(&x, xt, None).unwrap() + h.transpose() * &b_mat * &h_t;
        let ktt_diag = {
            let base_t = model.diag_cov_of(xt, None).unwrap();
            let mut v = base_t;
            for i in 0..xt.nrows() {
                v[i] += (h_t.column(i).transpose() * &b_mat * h_t.column(i))[(0, 0)];
            }
            v
        };
        let mean = kt.transpose() * &ky_inv * &y_shift + h_t.transpose() * &b_vec;
        let var = DVector::from_fn(xt.nrows(), |i, _| {
            ktt_diag[i] - (kt.column(i).transpose() * &ky_inv * kt.column(i))[(0, 0)]
        });
        (lml, mean, var)
    }

    #[test]
    fn meanfn_prediction_matches_augmented_kernel_oracle() {
        let model = mean_model(false, vec![0.3, -0.2], 0.8);
        let data = random_data(12, 41);
        let state = exact_fit(&model, &data).unwrap();
        let xt = DMatrix::from_row_slice(4, 1, &[-1.5, -0.2, 0.8, 1.9]);
        let pred = exact_predict(&state, &model, &data, &xt, None, None).unwrap();
        let (lml_o, mean_o, var_o) = augmented_oracle(&model, &data, &xt);
        for i in 0..4 {
            assert!((pred.mean[i] - mean_o[i]).abs() < 1e-8);
            assert!((pred.var[i] - var_o[i]).abs() < 1e-8);
        }
        let lml = exact_lml(&state, &model, &data).unwrap();
        assert!((lml - lml_o).abs() < 1e-8, "{lml} vs {lml_o}");
    }

    #[test]
    fn tiny_prior_covariance_reduces_to_shifted_zero_mean_gp() {
        // B -> 0: the basis weights pin to b, so predictions are the
        // zero-mean GP on y - h'b, shifted back by h'b
        let model = mean_model(false, vec![0.5, 0.0], 1e-12);
        let data = random_data(10, 43);
        let state = exact_fit(&model, &data).unwrap();
        let xt = DMatrix::from_row_slice(2, 1, &[-0.7, 1.1]);
        let pred = exact_predict(&state, &model, &data, &xt, None, None).unwrap();

        let base = gaussian_model(0.7, 1.0, 0.2);
        let shifted = Dataset::regression(
            data.x.clone(),
            data.obs.y.iter().map(|&y| y - 0.5).collect(),
        );
        let st0 = exact_fit(&base, &shifted).unwrap();
        let pred0 = exact_predict(&st0, &base, &shifted, &xt, None, None).unwrap();
        for i in 0..2 {
            assert!((pred.mean[i] - (pred0.mean[i] + 0.5)).abs() < 1e-6);
            assert!((pred.var[i] - pred0.var[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn vague_variance_dominates_exact_prior_variance() {
        let data = random_data(10, 47);
        let xt = DMatrix::from_row_slice(5, 1, &[-2.0, -1.0, 0.0, 1.0, 2.0]);
        let exact_prior = mean_model(false, vec![0.0, 0.0], 1.0);
        let vague = mean_model(true, vec![], 0.0);
        let p1 = exact_predict(&exact_fit(&exact_prior, &data).unwrap(), &exact_prior, &data, &xt, None, None)
            .unwrap();
        let p2 =
            exact_predict(&exact_fit(&vague, &data).unwrap(), &vague, &data, &xt, None, None).unwrap();
        for i in 0..5 {
            assert!(p2.var[i] >= p1.var[i] - 1e-12);
        }
    }

    #[test]
    fn huge_prior_covariance_approaches_the_vague_limit() {
        let data = random_data(10, 53);
        let xt = DMatrix::from_row_slice(3, 1, &[-1.2, 0.1, 1.4]);
        let wide = mean_model(false, vec![0.0, 0.0], 1e8);
        let vague = mean_model(true, vec![], 0.0);
        let p1 = exact_predict(&exact_fit(&wide, &data).unwrap(), &wide, &data, &xt, None, None).unwrap();
        let p2 =
            exact_predict(&exact_fit(&vague, &data).unwrap(), &vague, &data, &xt, None, None).unwrap();
        for i in 0..3 {
            assert!((p1.mean[i] - p2.mean[i]).abs() < 1e-4);
            assert!((p1.var[i] - p2.var[i]).abs() < 1e-4);
        }
    }

    #[test]
    fn beta_bar_satisfies_its_normal_equations() {
        let model = mean_model(false, vec![0.3, -0.2], 0.8);
        let data = random_data(12, 59);
        let state = exact_fit(&model, &data).unwrap();
        let aux = state.mean_aux.as_ref().unwrap();
        let mean_spec = model.mean.as_ref().unwrap();
        let (b_chol, _) = linalg::chol_with_jitter(&mean_spec.cov_matrix(), 0.0).unwrap();
        let a = b_chol.inverse() + &aux.h_kinv * aux.h.transpose();
        let rhs = b_chol.solve(&mean_spec.b_vector()) + &aux.h_kinv * data.y_vector();
        let resid = (a * &aux.beta_bar - rhs).norm();
        assert!(resid < 1e-9);
    }

    #[test]
    fn meanfn_gradients_match_finite_differences() {
        for vague in [false, true] {
            let model = if vague {
                mean_model(true, vec![], 0.0)
            } else {
                mean_model(false, vec![0.3, -0.2], 0.8)
            };
            let data = random_data(10, 61);
            let state = exact_fit(&model, &data).unwrap();
            let grad = exact_lml_grad(&state, &model, &data).unwrap();
            let fd = fd_lml_grad(&model, &data);
            for (a, f) in grad.iter().zip(&fd) {
                assert_relative_eq!(a, f, max_relative = 1e-5, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn vague_lml_is_shift_invariant_with_constant_basis() {
        let model = mean_model(true, vec![], 0.0);
        let data = random_data(10, 67);
        let shifted = Dataset::regression(
            data.x.clone(),
            data.obs.y.iter().map(|&y| y + 7.3).collect(),
        );
        let l1 = exact_lml(&exact_fit(&model, &data).unwrap(), &model, &data).unwrap();
        let l2 = exact_lml(&exact_fit(&model, &shifted).unwrap(), &model, &shifted).unwrap();
        assert!((l1 - l2).abs() < 1e-8, "{l1} vs {l2}");
    }
}
