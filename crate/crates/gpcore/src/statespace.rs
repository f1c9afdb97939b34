//! O(n) inference for 1-D Gaussian regression through the SDE dual:
//! state-space construction, exact discretization, Kalman filter and
//! Rauch-Tung-Striebel smoother.

use nalgebra::{DMatrix, DVector};

use crate::error::{GpError, Result};
use crate::kernels::{KernelKind, KernelSpec};
use crate::likelihoods::LikelihoodSpec;
use crate::linalg::{self, LN_2PI};
use crate::model::{Backend, Dataset, GPModel};

/// Linear time-invariant SDE whose solution has the requested covariance.
#[derive(Clone, Debug)]
pub struct StateSpaceModel {
    /// Feedback matrix, block diagonal over summed kernels.
    pub f: DMatrix<f64>,
    /// Noise effect matrix (m x s).
    pub l: DMatrix<f64>,
    /// White-noise spectral density (s x s).
    pub qc: DMatrix<f64>,
    /// Emission row (1 x m).
    pub h: DMatrix<f64>,
    /// Stationary covariance solving F P + P F^T + L Qc L^T = 0.
    pub p_inf: DMatrix<f64>,
    /// Per-kernel state-block sizes, for blockwise discretization.
    pub block_sizes: Vec<usize>,
}

pub fn check_kalman_support(kernel: &KernelSpec) -> Result<()> {
    match &kernel.kind {
        KernelKind::Exp { .. }
        | KernelKind::Matern32 { .. }
        | KernelKind::Matern52 { .. }
        | KernelKind::Constant { .. } => Ok(()),
        _ => Err(GpError::unsupported(format!(
            "kernel family '{}' has no state-space form; use the exact backend instead",
            kernel.family_name()
        ))),
    }
}

/// Solve F P + P F^T = -L Qc L^T by vectorization (small m only).
fn solve_lyapunov(f: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = f.nrows();
    let mut a = DMatrix::zeros(m * m, m * m);
    // (I kron F + F kron I) vec(P) = vec(F P + P F^T), column-major stacking
    for col in 0..m {
        for row in 0..m {
            let out = col * m + row;
            for k in 0..m {
                a[(out, col * m + k)] += f[(row, k)];
                a[(out, k * m + row)] += f[(col, k)];
            }
        }
    }
    let b = DVector::from_fn(m * m, |i, _| -rhs[(i % m, i / m)]);
    let lu = a.lu();
    let sol = lu
        .solve(&b)
        .ok_or_else(|| GpError::Factorization("singular Lyapunov system".into()))?;
    let mut p = DMatrix::from_fn(m, m, |i, j| sol[j * m + i]);
    linalg::symmetrize(&mut p);
    Ok(p)
}

fn kernel_block(kernel: &KernelSpec) -> Result<StateSpaceModel> {
    let one = DMatrix::from_element(1, 1, 1.0);
    match &kernel.kind {
        KernelKind::Constant { magn_sigma2 } => Ok(StateSpaceModel {
            f: DMatrix::zeros(1, 1),
            l: one.clone(),
            qc: DMatrix::zeros(1, 1),
            h: one.clone(),
            p_inf: DMatrix::from_element(1, 1, magn_sigma2.value),
            block_sizes: vec![1],
        }),
        KernelKind::Exp { magn_sigma2, lengthscales } => {
            let (s2, l) = (magn_sigma2.value, lengthscales[0].value);
            Ok(StateSpaceModel {
                f: DMatrix::from_element(1, 1, -1.0 / l),
                l: one.clone(),
                qc: DMatrix::from_element(1, 1, 2.0 * s2 / l),
                h: one.clone(),
                p_inf: DMatrix::from_element(1, 1, s2),
                block_sizes: vec![1],
            })
        }
        KernelKind::Matern32 { magn_sigma2, lengthscales } => {
            let (s2, l) = (magn_sigma2.value, lengthscales[0].value);
            let lam = 3.0_f64.sqrt() / l;
            let f = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -lam * lam, -2.0 * lam]);
            let lmat = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
            let qc = DMatrix::from_element(1, 1, 4.0 * lam.powi(3) * s2);
            let rhs = &lmat * &qc * lmat.transpose();
            let p_inf = solve_lyapunov(&f, &rhs)?;
            Ok(StateSpaceModel {
                f,
                l: lmat,
                qc,
                h: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
                p_inf,
                block_sizes: vec![2],
            })
        }
        KernelKind::Matern52 { magn_sigma2, lengthscales } => {
            let (s2, l) = (magn_sigma2.value, lengthscales[0].value);
            let lam = 5.0_f64.sqrt() / l;
            let f = DMatrix::from_row_slice(
                3,
                3,
                &[
                    0.0, 1.0, 0.0, //
                    0.0, 0.0, 1.0, //
                    -lam.powi(3), -3.0 * lam * lam, -3.0 * lam,
                ],
            );
            let lmat = DMatrix::from_row_slice(3, 1, &[0.0, 0.0, 1.0]);
            let qc = DMatrix::from_element(1, 1, s2 * 16.0 / 3.0 * lam.powi(5));
            let rhs = &lmat * &qc * lmat.transpose();
            let p_inf = solve_lyapunov(&f, &rhs)?;
            Ok(StateSpaceModel {
                f,
                l: lmat,
                qc,
                h: DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]),
                p_inf,
                block_sizes: vec![3],
            })
        }
        _ => Err(GpError::unsupported(format!(
            "kernel family '{}' has no state-space form; use the exact backend instead",
            kernel.family_name()
        ))),
    }
}

/// State-space form of a sum of supported kernels: block-diagonal stacking
/// with concatenated emission rows.
pub fn to_statespace(kernels: &[KernelSpec]) -> Result<StateSpaceModel> {
    if kernels.is_empty() {
        return Err(GpError::input("state-space conversion needs at least one kernel"));
    }
    let blocks: Vec<StateSpaceModel> = kernels.iter().map(kernel_block).collect::<Result<_>>()?;
    let m: usize = blocks.iter().map(|b| b.f.nrows()).sum();
    let s: usize = blocks.iter().map(|b| b.qc.nrows()).sum();
    let mut f = DMatrix::zeros(m, m);
    let mut l = DMatrix::zeros(m, s);
    let mut qc = DMatrix::zeros(s, s);
    let mut h = DMatrix::zeros(1, m);
    let mut p_inf = DMatrix::zeros(m, m);
    let mut sizes = Vec::new();
    let (mut row, mut col) = (0, 0);
    for b in &blocks {
        let (bm, bs) = (b.f.nrows(), b.qc.nrows());
        f.view_mut((row, row), (bm, bm)).copy_from(&b.f);
        l.view_mut((row, col), (bm, bs)).copy_from(&b.l);
        qc.view_mut((col, col), (bs, bs)).copy_from(&b.qc);
        h.view_mut((0, row), (1, bm)).copy_from(&b.h);
        p_inf.view_mut((row, row), (bm, bm)).copy_from(&b.p_inf);
        sizes.push(bm);
        row += bm;
        col += bs;
    }
    Ok(StateSpaceModel { f, l, qc, h, p_inf, block_sizes: sizes })
}

impl StateSpaceModel {
    /// Residual of the Lyapunov equation; zero for a valid model.
    pub fn lyapunov_residual(&self) -> f64 {
        let r = &self.f * &self.p_inf
            + &self.p_inf * self.f.transpose()
            + &self.l * &self.qc * self.l.transpose();
        r.amax()
    }

    /// Exact discretization over a step: A = exp(F dt),
    /// Q = P_inf - A P_inf A^T (stationary identity).
    pub fn discretize(&self, dt: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if dt < 0.0 || !dt.is_finite() {
            return Err(GpError::input(format!("step must be nonnegative, got {dt}")));
        }
        let m = self.f.nrows();
        if dt == 0.0 {
            return Ok((DMatrix::identity(m, m), DMatrix::zeros(m, m)));
        }
        let mut a = DMatrix::zeros(m, m);
        let mut at = 0;
        for &bm in &self.block_sizes {
            let fb = self.f.view((at, at), (bm, bm)).clone_owned();
            let ab = (fb * dt).exp();
            a.view_mut((at, at), (bm, bm)).copy_from(&ab);
            at += bm;
        }
        let mut q = &self.p_inf - &a * &self.p_inf * a.transpose();
        linalg::symmetrize(&mut q);
        for i in 0..m {
            if q[(i, i)] < 0.0 {
                q[(i, i)] = 0.0;
            }
        }
        Ok((a, q))
    }
}

/// Evidence and smoothed posterior from the Kalman/RTS pass.
#[derive(Clone, Debug)]
pub struct KalmanFit {
    pub lml: f64,
    /// Smoothed latent mean/variance at the training times, input order.
    pub train_mean: Vec<f64>,
    pub train_var: Vec<f64>,
    /// Smoothed latent mean/variance at the prediction times, input order.
    pub test_mean: Vec<f64>,
    pub test_var: Vec<f64>,
}

/// Kalman filter + RTS smoother for a 1-D Gaussian-likelihood GP. Test times
/// are inserted as missing observations; duplicate timestamps are processed
/// as consecutive zero-step updates.
pub fn kalman_fit_predict(model: &GPModel, data: &Dataset, t_test: &[f64]) -> Result<KalmanFit> {
    if model.backend != Backend::Kalman {
        return Err(GpError::input("kalman_fit_predict requires the kalman backend"));
    }
    model.validate(data)?;
    let sigma2 = match &model.likelihood {
        LikelihoodSpec::Gaussian { sigma2 } => sigma2.value,
        _ => unreachable!("validated"),
    };
    if t_test.iter().any(|t| !t.is_finite()) {
        return Err(GpError::input("non-finite prediction time"));
    }
    let ssm = to_statespace(&model.kernels)?;
    let m = ssm.f.nrows();
    let y = &data.obs.y;

    // merged event stream: (time, Some(train idx) | None for test idx)
    struct Event {
        t: f64,
        train: Option<usize>,
        test: Option<usize>,
    }
    let mut events: Vec<Event> = data
        .x
        .iter()
        .enumerate()
        .map(|(i, r)| Event { t: r[0], train: Some(i), test: None })
        .chain(t_test.iter().enumerate().map(|(i, &t)| Event { t, train: None, test: Some(i) }))
        .collect();
    events.sort_by(|a, b| a.t.partial_cmp(&b.t).unwrap());

    let n_ev = events.len();
    let h = &ssm.h;
    let mut m_filt = DVector::<f64>::zeros(m);
    let mut p_filt = ssm.p_inf.clone();
    let mut lml = 0.0;

    let mut preds: Vec<(DVector<f64>, DMatrix<f64>)> = Vec::with_capacity(n_ev);
    let mut filts: Vec<(DVector<f64>, DMatrix<f64>)> = Vec::with_capacity(n_ev);
    let mut trans: Vec<DMatrix<f64>> = Vec::with_capacity(n_ev);

    let mut prev_t = None;
    for ev in &events {
        let dt = prev_t.map_or(0.0, |p: f64| ev.t - p);
        let (a, q) = ssm.discretize(dt)?;
        let m_pred = &a * &m_filt;
        let mut p_pred = &a * &p_filt * a.transpose() + &q;
        linalg::symmetrize(&mut p_pred);
        if let Some(i) = ev.train {
            let hp = h * &p_pred; // 1 x m
            let s = (&hp * h.transpose())[(0, 0)] + sigma2;
            let v = y[i] - (h * &m_pred)[(0, 0)];
            lml += -0.5 * (LN_2PI + s.ln() + v * v / s);
            let k = (&p_pred * h.transpose()) / s; // m x 1
            m_filt = &m_pred + &k * v;
            // Joseph form keeps the covariance symmetric nonnegative
            let ikh = DMatrix::identity(m, m) - &k * h;
            p_filt = &ikh * &p_pred * ikh.transpose() + &k * k.transpose() * sigma2;
            linalg::symmetrize(&mut p_filt);
        } else {
            m_filt = m_pred.clone();
            p_filt = p_pred.clone();
        }
        preds.push((m_pred, p_pred));
        filts.push((m_filt.clone(), p_filt.clone()));
        trans.push(a);
        prev_t = Some(ev.t);
    }

    // RTS smoother
    let mut smooth: Vec<(DVector<f64>, DMatrix<f64>)> = vec![filts[n_ev - 1].clone(); n_ev];
    for k in (0..n_ev - 1).rev() {
        let (m_f, p_f) = &filts[k];
        let (m_p_next, p_p_next) = &preds[k + 1];
        let a_next = &trans[k + 1];
        // G = P_f A^T (P_pred^{-1}); solve via Cholesky of P_pred
        let (chol, _) = linalg::chol_with_jitter(p_p_next, 1e-12)?;
        let g = (chol.solve(&(a_next * p_f)))
            .transpose();
        let (m_s_next, p_s_next) = smooth[k + 1].clone();
        let m_s = m_f + &g * (&m_s_next - m_p_next);
        let mut p_s = p_f + &g * (&p_s_next - p_p_next) * g.transpose();
        linalg::symmetrize(&mut p_s);
        smooth[k] = (m_s, p_s);
    }

    let mut out = KalmanFit {
        lml,
        train_mean: vec![0.0; data.n()],
        train_var: vec![0.0; data.n()],
        test_mean: vec![0.0; t_test.len()],
        test_var: vec![0.0; t_test.len()],
    };
    for (ev, (m_s, p_s)) in events.iter().zip(&smooth) {
        let mean = (h * m_s)[(0, 0)];
        let var = ((h * p_s) * h.transpose())[(0, 0)].max(0.0);
        if let Some(i) = ev.train {
            out.train_mean[i] = mean;
            out.train_var[i] = var;
        }
        if let Some(i) = ev.test {
            out.test_mean[i] = mean;
            out.test_var[i] = var;
        }
    }
    Ok(out)
}
