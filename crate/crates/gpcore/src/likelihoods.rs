//! Observation models: log likelihoods, latent derivatives up to third
//! order, parameter derivatives, EP tilted moments and observation-space
//! predictions.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{GpError, Result};
use crate::kernels::Hyper;
use crate::linalg::{norm_logpdf, LN_2PI};
use crate::quad::{self, DEFAULT_NODES};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum LikelihoodSpec {
    Gaussian { sigma2: Hyper },
    /// Student-t with degrees of freedom `nu` (fixed at 4 unless given a
    /// non-fixed prior) and scale `sigma_t`.
    StudentT { nu: Hyper, sigma_t: Hyper },
    Probit,
    Logit,
    Poisson,
    Negbin { disper: Hyper },
    Binomial,
    Weibull { shape: Hyper },
}

/// Targets plus the auxiliary vectors a family requires.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ObservationData {
    pub y: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exposure: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub censoring: Option<Vec<f64>>,
}

impl ObservationData {
    pub fn regression(y: Vec<f64>) -> Self {
        ObservationData { y, ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Per-point view with defaulted auxiliaries.
    pub fn point(&self, i: usize) -> ObsPoint {
        ObsPoint {
            y: Some(self.y[i]),
            exposure: self.exposure.as_ref().map_or(1.0, |e| e[i]),
            trials: self.trials.as_ref().map_or(1.0, |z| z[i]),
            censored: self.censoring.as_ref().map_or(false, |c| c[i] != 0.0),
        }
    }
}

/// One observation site: target (if known) and auxiliaries.
#[derive(Clone, Copy, Debug)]
pub struct ObsPoint {
    pub y: Option<f64>,
    pub exposure: f64,
    pub trials: f64,
    pub censored: bool,
}

impl ObsPoint {
    pub fn target(y: f64) -> Self {
        ObsPoint { y: Some(y), exposure: 1.0, trials: 1.0, censored: false }
    }

    pub fn latent_only() -> Self {
        ObsPoint { y: None, exposure: 1.0, trials: 1.0, censored: false }
    }
}

pub enum DerivOrder {
    First,
    Second,
    Third,
}

impl LikelihoodSpec {
    pub fn family_name(&self) -> &'static str {
        match self {
            LikelihoodSpec::Gaussian { .. } => "gaussian",
            LikelihoodSpec::StudentT { .. } => "t",
            LikelihoodSpec::Probit => "probit",
            LikelihoodSpec::Logit => "logit",
            LikelihoodSpec::Poisson => "poisson",
            LikelihoodSpec::Negbin { .. } => "negbin",
            LikelihoodSpec::Binomial => "binomial",
            LikelihoodSpec::Weibull { .. } => "weibull",
        }
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self, LikelihoodSpec::Gaussian { .. })
    }

    /// Log-concavity in the latent value; student-t is the one exception.
    pub fn is_log_concave(&self) -> bool {
        !matches!(self, LikelihoodSpec::StudentT { .. })
    }

    pub fn validate(&self, data: &ObservationData) -> Result<()> {
        let n = data.y.len();
        let need = |cond: bool, what: &str| -> Result<()> {
            if cond {
                Ok(())
            } else {
                Err(GpError::validation(
                    "likelihood_data",
                    format!("{} likelihood: {what}", self.family_name()),
                ))
            }
        };
        let none_of = |e: bool, z: bool, c: bool| -> Result<()> {
            need(!e || data.exposure.is_none(), "exposure vector not used by this family")?;
            need(!z || data.trials.is_none(), "trials vector not used by this family")?;
            need(!c || data.censoring.is_none(), "censoring vector not used by this family")
        };
        match self {
            LikelihoodSpec::Gaussian { sigma2 } => {
                // zero noise is allowed: it gives the interpolation limit
                need(sigma2.value >= 0.0, "sigma2 must be nonnegative")?;
                none_of(true, true, true)
            }
            LikelihoodSpec::StudentT { nu, sigma_t } => {
                need(nu.value > 0.0, "nu must be positive")?;
                need(sigma_t.value > 0.0, "sigma_t must be positive")?;
                none_of(true, true, true)
            }
            LikelihoodSpec::Probit | LikelihoodSpec::Logit => {
                need(data.y.iter().all(|&y| y == 1.0 || y == -1.0), "targets must be +-1")?;
                none_of(true, true, true)
            }
            LikelihoodSpec::Poisson => {
                need(
                    data.y.iter().all(|&y| y >= 0.0 && y.fract() == 0.0),
                    "targets must be nonnegative integers",
                )?;
                let e = data.exposure.as_ref().ok_or_else(|| {
                    GpError::validation("likelihood_data", "poisson requires an exposure vector")
                })?;
                need(e.len() == n && e.iter().all(|&v| v > 0.0), "exposure must be positive, length n")?;
                none_of(false, true, true)
            }
            LikelihoodSpec::Negbin { disper } => {
                need(disper.value > 0.0, "dispersion must be positive")?;
                need(
                    data.y.iter().all(|&y| y >= 0.0 && y.fract() == 0.0),
                    "targets must be nonnegative integers",
                )?;
                let e = data.exposure.as_ref().ok_or_else(|| {
                    GpError::validation("likelihood_data", "negbin requires an exposure vector")
                })?;
                need(e.len() == n && e.iter().all(|&v| v > 0.0), "exposure must be positive, length n")?;
                none_of(false, true, true)
            }
            LikelihoodSpec::Binomial => {
                let z = data.trials.as_ref().ok_or_else(|| {
                    GpError::validation("likelihood_data", "binomial requires a trials vector")
                })?;
                need(z.len() == n && z.iter().all(|&v| v > 0.0 && v.fract() == 0.0), "trials must be positive integers")?;
                need(
                    data.y
                        .iter()
                        .zip(z)
                        .all(|(&y, &zi)| y >= 0.0 && y.fract() == 0.0 && y <= zi),
                    "targets must be integers in 0..=trials",
                )?;
                none_of(true, false, true)
            }
            LikelihoodSpec::Weibull { shape } => {
                need(shape.value > 0.0, "shape must be positive")?;
                need(data.y.iter().all(|&y| y > 0.0), "targets must be positive")?;
                let c = data.censoring.as_ref().ok_or_else(|| {
                    GpError::validation("likelihood_data", "weibull requires a censoring vector")
                })?;
                need(c.len() == n && c.iter().all(|&v| v == 0.0 || v == 1.0), "censoring must be 0/1")?;
                none_of(true, true, false)
            }
        }
    }

    /// log p(y_i | f, params) for a single site.
    pub fn lp_point(&self, f: f64, p: &ObsPoint) -> f64 {
        let y = p.y.expect("lp_point requires a target");
        match self {
            LikelihoodSpec::Gaussian { sigma2 } => norm_logpdf(y, f, sigma2.value),
            LikelihoodSpec::StudentT { nu, sigma_t } => {
                let (nu, st) = (nu.value, sigma_t.value);
                let e = y - f;
                ln_gamma(0.5 * (nu + 1.0))
                    - ln_gamma(0.5 * nu)
                    - 0.5 * (nu * std::f64::consts::PI * st * st).ln()
                    - 0.5 * (nu + 1.0) * (1.0 + e * e / (nu * st * st)).ln()
            }
            LikelihoodSpec::Probit => norm_logcdf(y * f),
            LikelihoodSpec::Logit => -softplus(-y * f),
            LikelihoodSpec::Poisson => {
                let mu = p.exposure * f.exp();
                y * (f + p.exposure.ln()) - mu - ln_gamma(y + 1.0)
            }
            LikelihoodSpec::Negbin { disper } => {
                let r = disper.value;
                let mu = p.exposure * f.exp();
                ln_gamma(r + y) - ln_gamma(y + 1.0) - ln_gamma(r) + r * (r.ln() - (r + mu).ln())
                    + y * (mu.ln() - (r + mu).ln())
            }
            LikelihoodSpec::Binomial => {
                let z = p.trials;
                let lp = -softplus(-f); // log sigma(f)
                let l1mp = -softplus(f); // log (1 - sigma(f))
                ln_gamma(z + 1.0) - ln_gamma(y + 1.0) - ln_gamma(z - y + 1.0) + y * lp
                    + (z - y) * l1mp
            }
            LikelihoodSpec::Weibull { shape } => {
                let r = shape.value;
                let u = if p.censored { 0.0 } else { 1.0 };
                u * (r.ln() + f + (r - 1.0) * y.ln()) - f.exp() * y.powf(r)
            }
        }
    }

    /// d^order/df^order log p(y_i | f) for a single site.
    pub fn dlp_point(&self, f: f64, p: &ObsPoint, order: usize) -> f64 {
        let y = p.y.expect("dlp_point requires a target");
        match self {
            LikelihoodSpec::Gaussian { sigma2 } => {
                let s2 = sigma2.value;
                match order {
                    1 => (y - f) / s2,
                    2 => -1.0 / s2,
                    _ => 0.0,
                }
            }
            LikelihoodSpec::StudentT { nu, sigma_t } => {
                let (nu, st) = (nu.value, sigma_t.value);
                let e = y - f;
                let u = nu * st * st + e * e;
                match order {
                    1 => (nu + 1.0) * e / u,
                    2 => (nu + 1.0) * (e * e - nu * st * st) / (u * u),
                    _ => (nu + 1.0) * 2.0 * e * (e * e - 3.0 * nu * st * st) / (u * u * u),
                }
            }
            LikelihoodSpec::Probit => {
                let z = y * f;
                let h = norm_ratio(z);
                match order {
                    1 => y * h,
                    2 => -h * (z + h),
                    _ => y * h * (z * z + 3.0 * z * h + 2.0 * h * h - 1.0),
                }
            }
            LikelihoodSpec::Logit => {
                let pr = sigmoid(f);
                let t = 0.5 * (y + 1.0);
                match order {
                    1 => t - pr,
                    2 => -pr * (1.0 - pr),
                    _ => -pr * (1.0 - pr) * (1.0 - 2.0 * pr),
                }
            }
            LikelihoodSpec::Poisson => {
                let mu = p.exposure * f.exp();
                match order {
                    1 => y - mu,
                    _ => -mu,
                }
            }
            LikelihoodSpec::Negbin { disper } => {
                let r = disper.value;
                let mu = p.exposure * f.exp();
                let u = r + mu;
                match order {
                    1 => r * (y - mu) / u,
                    2 => -r * mu * (r + y) / (u * u),
                    _ => -r * (r + y) * mu * (r - mu) / (u * u * u),
                }
            }
            LikelihoodSpec::Binomial => {
                let z = p.trials;
                let pr = sigmoid(f);
                match order {
                    1 => y - z * pr,
                    2 => -z * pr * (1.0 - pr),
                    _ => -z * pr * (1.0 - pr) * (1.0 - 2.0 * pr),
                }
            }
            LikelihoodSpec::Weibull { shape } => {
                let r = shape.value;
                let u = if p.censored { 0.0 } else { 1.0 };
                let g = f.exp() * y.powf(r);
                match order {
                    1 => u - g,
                    _ => -g,
                }
            }
        }
    }

    /// Total log likelihood.
    pub fn ll(&self, f: &DVector<f64>, data: &ObservationData) -> Result<f64> {
        self.check_lengths(f, data)?;
        Ok((0..data.len()).map(|i| self.lp_point(f[i], &data.point(i))).sum())
    }

    /// Elementwise derivatives of order 1..=3 w.r.t. the latent values.
    pub fn llg(&self, f: &DVector<f64>, data: &ObservationData, order: usize) -> Result<DVector<f64>> {
        if !(1..=3).contains(&order) {
            return Err(GpError::input(format!("derivative order must be 1..=3, got {order}")));
        }
        self.check_lengths(f, data)?;
        Ok(DVector::from_fn(data.len(), |i, _| self.dlp_point(f[i], &data.point(i), order)))
    }

    fn check_lengths(&self, f: &DVector<f64>, data: &ObservationData) -> Result<()> {
        if f.len() != data.len() {
            return Err(GpError::input(format!(
                "latent vector length {} does not match {} observations",
                f.len(),
                data.len()
            )));
        }
        Ok(())
    }

    /// Grouped free-parameter descriptors in packing order.
    pub fn hyper_views(&self) -> Vec<crate::kernels::HyperView> {
        let name = self.family_name();
        let mut out = Vec::new();
        let mut push = |label: String, h: &Hyper| {
            if !h.prior.is_fixed() {
                out.push(crate::kernels::HyperView {
                    label,
                    values: vec![h.value],
                    priors: vec![h.prior.clone()],
                });
            }
        };
        match self {
            LikelihoodSpec::Gaussian { sigma2 } => push(format!("{name}.sigma2"), sigma2),
            LikelihoodSpec::StudentT { nu, sigma_t } => {
                push(format!("{name}.nu"), nu);
                push(format!("{name}.sigma_t"), sigma_t);
            }
            LikelihoodSpec::Negbin { disper } => push(format!("{name}.disper"), disper),
            LikelihoodSpec::Weibull { shape } => push(format!("{name}.shape"), shape),
            _ => {}
        }
        out
    }

    pub fn n_free_params(&self) -> usize {
        self.hyper_views().iter().map(|v| v.values.len()).sum()
    }

    pub fn set_free_params(&mut self, values: &[f64]) -> usize {
        let mut idx = 0;
        let mut assign = |h: &mut Hyper| {
            if !h.prior.is_fixed() {
                h.value = values[idx];
                idx += 1;
            }
        };
        match self {
            LikelihoodSpec::Gaussian { sigma2 } => assign(sigma2),
            LikelihoodSpec::StudentT { nu, sigma_t } => {
                assign(nu);
                assign(sigma_t);
            }
            LikelihoodSpec::Negbin { disper } => assign(disper),
            LikelihoodSpec::Weibull { shape } => assign(shape),
            _ => {}
        }
        idx
    }

    /// Derivatives w.r.t. log of each free likelihood parameter:
    /// (d lp / d log phi, d^2 lp / df dlog phi, d^3 lp / df^2 dlog phi),
    /// each an n-vector per free parameter, in packing order.
    pub fn llg_param(
        &self,
        f: &DVector<f64>,
        data: &ObservationData,
    ) -> Result<Vec<(DVector<f64>, DVector<f64>, DVector<f64>)>> {
        self.check_lengths(f, data)?;
        let n = data.len();
        let per_param = |dfn: &dyn Fn(f64, &ObsPoint) -> (f64, f64, f64)| {
            let mut a = DVector::zeros(n);
            let mut b = DVector::zeros(n);
            let mut c = DVector::zeros(n);
            for i in 0..n {
                let (x, y, z) = dfn(f[i], &data.point(i));
                a[i] = x;
                b[i] = y;
                c[i] = z;
            }
            (a, b, c)
        };
        let mut out = Vec::new();
        match self {
            LikelihoodSpec::Gaussian { sigma2 } => {
                if !sigma2.prior.is_fixed() {
                    let s2 = sigma2.value;
                    out.push(per_param(&|fv, p| {
                        let e = p.y.unwrap() - fv;
                        (-0.5 + e * e / (2.0 * s2), -e / s2, 1.0 / s2)
                    }));
                }
            }
            LikelihoodSpec::StudentT { nu, sigma_t } => {
                let (nuv, st) = (nu.value, sigma_t.value);
                let st2 = st * st;
                if !nu.prior.is_fixed() {
                    out.push(per_param(&|fv, p| {
                        let e = p.y.unwrap() - fv;
                        let u = nuv * st2 + e * e;
                        let a = 1.0 + e * e / (nuv * st2);
                        let dlp = 0.5 * digamma(0.5 * (nuv + 1.0)) - 0.5 * digamma(0.5 * nuv)
                            - 0.5 / nuv
                            - 0.5 * a.ln()
                            + (nuv + 1.0) * e * e / (2.0 * nuv * u);
                        let dllg = e * (e * e - st2) / (u * u);
                        let dllg2 = ((e * e - (2.0 * nuv + 1.0) * st2) * u
                            - 2.0 * (nuv + 1.0) * (e * e - nuv * st2) * st2)
                            / (u * u * u);
                        (nuv * dlp, nuv * dllg, nuv * dllg2)
                    }));
                }
                if !sigma_t.prior.is_fixed() {
                    out.push(per_param(&|fv, p| {
                        let e = p.y.unwrap() - fv;
                        let u = nuv * st2 + e * e;
                        let dlp = -1.0 + (nuv + 1.0) * e * e / u;
                        let dllg = -2.0 * nuv * st2 * (nuv + 1.0) * e / (u * u);
                        let dllg2 =
                            -2.0 * nuv * st2 * (nuv + 1.0) * (3.0 * e * e - nuv * st2) / (u * u * u);
                        (dlp, dllg, dllg2)
                    }));
                }
            }
            LikelihoodSpec::Negbin { disper } => {
                if !disper.prior.is_fixed() {
                    let r = disper.value;
                    out.push(per_param(&|fv, p| {
                        let y = p.y.unwrap();
                        let mu = p.exposure * fv.exp();
                        let u = r + mu;
                        let dlp = digamma(r + y) - digamma(r) + r.ln() + 1.0 - u.ln() - (r + y) / u;
                        let dllg = mu * (y - mu) / (u * u);
                        let dllg2 = -mu * (2.0 * r * mu - r * y + y * mu) / (u * u * u);
                        (r * dlp, r * dllg, r * dllg2)
                    }));
                }
            }
            LikelihoodSpec::Weibull { shape } => {
                if !shape.prior.is_fixed() {
                    let r = shape.value;
                    out.push(per_param(&|fv, p| {
                        let y = p.y.unwrap();
                        let u = if p.censored { 0.0 } else { 1.0 };
                        let g = fv.exp() * y.powf(r) * y.ln();
                        let dlp = u * (1.0 + r * y.ln()) - r * g;
                        (dlp, -r * g, -r * g)
                    }));
                }
            }
            _ => {}
        }
        Ok(out)
    }

    /// Moments of p(y_i | f) N(f | mu_cav, s2_cav): (log Z, mean, variance).
    ///
    /// Probit and Gaussian use closed forms; everything else goes through
    /// Gauss-Hermite quadrature recentered at the cavity.
    pub fn tilted_moments(
        &self,
        point: &ObsPoint,
        mu_cav: f64,
        s2_cav: f64,
        n_nodes: usize,
    ) -> Result<(f64, f64, f64)> {
        if s2_cav <= 0.0 {
            return Err(GpError::numerical(format!(
                "non-positive cavity variance {s2_cav} (EP instability)"
            )));
        }
        match self {
            LikelihoodSpec::Gaussian { sigma2 } => {
                let s2 = sigma2.value;
                let y = point.y.unwrap();
                let log_z = norm_logpdf(y, mu_cav, s2 + s2_cav);
                let v = 1.0 / (1.0 / s2_cav + 1.0 / s2);
                let m = v * (mu_cav / s2_cav + y / s2);
                Ok((log_z, m, v))
            }
            LikelihoodSpec::Probit => {
                let y = point.y.unwrap();
                let denom = (1.0 + s2_cav).sqrt();
                let z = y * mu_cav / denom;
                let log_z = norm_logcdf(z);
                let h = norm_ratio(z);
                let m = mu_cav + y * s2_cav * h / denom;
                let v = s2_cav - s2_cav * s2_cav * h * (z + h) / (1.0 + s2_cav);
                Ok((log_z, m, v.max(1e-300)))
            }
            LikelihoodSpec::StudentT { .. } => {
                // polynomial tails converge slowly under Gauss-Hermite; use a
                // four-fold rule and keep the reference at cavity width
                let (log_z, m, v) = quad::tilted_moments_opts(mu_cav, s2_cav, 4 * n_nodes, true, |f| {
                    self.lp_point(f, point)
                });
                Ok((log_z, m, v))
            }
            _ => {
                let (log_z, m, v) =
                    quad::tilted_moments(mu_cav, s2_cav, n_nodes, |f| self.lp_point(f, point));
                Ok((log_z, m, v))
            }
        }
    }

    /// Expectation of d log p / d log phi_j under the tilted distribution,
    /// one value per free likelihood parameter. Used by EP's marginal
    /// likelihood gradient.
    pub fn tilted_param_derivs(
        &self,
        point: &ObsPoint,
        mu_cav: f64,
        s2_cav: f64,
        n_nodes: usize,
    ) -> Result<Vec<f64>> {
        let n_par = self.n_free_params();
        if n_par == 0 {
            return Ok(Vec::new());
        }
        // normalizer first, then expectations of the parameter gradients
        let (log_z, _, _) = self.tilted_moments(point, mu_cav, s2_cav, n_nodes)?;
        let data1 = ObservationData {
            y: vec![point.y.unwrap()],
            exposure: Some(vec![point.exposure]),
            trials: Some(vec![point.trials]),
            censoring: Some(vec![if point.censored { 1.0 } else { 0.0 }]),
        };
        let mut out = vec![0.0; n_par];
        for (j, val) in out.iter_mut().enumerate() {
            *val = quad::gauss_hermite_expect(mu_cav, s2_cav, n_nodes, |f| {
                let fv = DVector::from_element(1, f);
                let derivs = self.llg_param_unchecked(&fv, &data1);
                let w = (self.lp_point(f, point) - log_z).exp();
                w * derivs[j]
            });
        }
        Ok(out)
    }

    fn llg_param_unchecked(&self, f: &DVector<f64>, data: &ObservationData) -> Vec<f64> {
        self.llg_param(f, data)
            .expect("validated data")
            .into_iter()
            .map(|(a, _, _)| a[0])
            .collect()
    }

    /// Observation-space prediction against a Gaussian latent N(m_f, v_f):
    /// (E[y], Var[y], log p(y) when the point carries a target).
    pub fn predict(&self, m_f: f64, v_f: f64, point: &ObsPoint) -> Result<(f64, f64, Option<f64>)> {
        if v_f < 0.0 {
            return Err(GpError::input(format!("negative latent variance {v_f}")));
        }
        let lp = |p: &ObsPoint| -> Option<f64> {
            p.y.map(|_| quad::gauss_hermite_log_expect(m_f, v_f, DEFAULT_NODES, |f| self.lp_point(f, p)))
        };
        match self {
            LikelihoodSpec::Gaussian { sigma2 } => {
                let s2 = sigma2.value;
                let lp = point.y.map(|y| norm_logpdf(y, m_f, v_f + s2));
                Ok((m_f, v_f + s2, lp))
            }
            LikelihoodSpec::StudentT { nu, sigma_t } => {
                let nuv = nu.value;
                let var_t = if nuv > 2.0 {
                    nuv * sigma_t.value * sigma_t.value / (nuv - 2.0)
                } else {
                    f64::INFINITY
                };
                Ok((m_f, v_f + var_t, lp(point)))
            }
            LikelihoodSpec::Probit => {
                let p1 = norm_cdf(m_f / (1.0 + v_f).sqrt());
                let lp = point.y.map(|y| norm_logcdf(y * m_f / (1.0 + v_f).sqrt()));
                Ok((2.0 * p1 - 1.0, 4.0 * p1 * (1.0 - p1), lp))
            }
            LikelihoodSpec::Logit => {
                let p1 = quad::gauss_hermite_expect(m_f, v_f, DEFAULT_NODES, sigmoid);
                Ok((2.0 * p1 - 1.0, 4.0 * p1 * (1.0 - p1), lp(point)))
            }
            LikelihoodSpec::Poisson => {
                let e = point.exposure;
                let ey = e * (m_f + 0.5 * v_f).exp();
                let e2 = e * e * (2.0 * m_f + v_f).exp();
                let vy = ey + e2 * (v_f.exp() - 1.0);
                Ok((ey, vy, lp(point)))
            }
            LikelihoodSpec::Negbin { disper } => {
                let r = disper.value;
                let e = point.exposure;
                let emu = e * (m_f + 0.5 * v_f).exp();
                let emu2 = e * e * (2.0 * m_f + 2.0 * v_f).exp();
                let vy = emu + (1.0 + 1.0 / r) * emu2 - emu * emu;
                Ok((emu, vy, lp(point)))
            }
            LikelihoodSpec::Binomial => {
                let z = point.trials;
                let ep = quad::gauss_hermite_expect(m_f, v_f, DEFAULT_NODES, sigmoid);
                let ep2 = quad::gauss_hermite_expect(m_f, v_f, DEFAULT_NODES, |f| {
                    let s = sigmoid(f);
                    s * s
                });
                let ey = z * ep;
                let vy = z * (ep - ep2) + z * z * (ep2 - ep * ep);
                Ok((ey, vy, lp(point)))
            }
            LikelihoodSpec::Weibull { shape } => {
                let r = shape.value;
                let g1 = (ln_gamma(1.0 + 1.0 / r)).exp();
                let g2 = (ln_gamma(1.0 + 2.0 / r)).exp();
                let ey = quad::gauss_hermite_expect(m_f, v_f, DEFAULT_NODES, |f| (-f / r).exp() * g1);
                let ey2 =
                    quad::gauss_hermite_expect(m_f, v_f, DEFAULT_NODES, |f| (-2.0 * f / r).exp() * g2);
                Ok((ey, ey2 - ey * ey, lp(point)))
            }
        }
    }
}

// --- stable scalar functions -------------------------------------------------

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn norm_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

/// log Phi(z), switching to the asymptotic tail expansion far left.
pub fn norm_logcdf(z: f64) -> f64 {
    if z > -30.0 {
        let c = norm_cdf(z);
        if c > 0.0 {
            return c.ln();
        }
    }
    // Phi(z) = phi(z)/(-z) * (1 - 1/z^2 + 3/z^4 - 15/z^6 + 105/z^8 - ...)
    let z2 = z * z;
    let series = 1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2)
        + 105.0 / (z2 * z2 * z2 * z2);
    -0.5 * z2 - 0.5 * LN_2PI - (-z).ln() + series.ln()
}

/// phi(z) / Phi(z), stable for large negative z.
pub fn norm_ratio(z: f64) -> f64 {
    if z > -30.0 {
        let log_pdf = -0.5 * z * z - 0.5 * LN_2PI;
        (log_pdf - norm_logcdf(z)).exp()
    } else {
        let z2 = z * z;
        let series = 1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2)
            + 105.0 / (z2 * z2 * z2 * z2);
        -z / series
    }
}
