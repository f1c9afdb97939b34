//! Covariance functions: pointwise evaluation, train/cross matrices and
//! hyperparameter-derivative matrices (taken w.r.t. log parameters).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::priors::PriorSpec;

/// One scalar hyperparameter together with its prior.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Hyper {
    pub value: f64,
    #[serde(default = "default_prior")]
    pub prior: PriorSpec,
}

fn default_prior() -> PriorSpec {
    PriorSpec::LogUnif
}

impl Hyper {
    pub fn new(value: f64) -> Self {
        Hyper { value, prior: PriorSpec::LogUnif }
    }

    pub fn fixed(value: f64) -> Self {
        Hyper { value, prior: PriorSpec::Fixed }
    }

    pub fn with_prior(value: f64, prior: PriorSpec) -> Self {
        Hyper { value, prior }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KernelKind {
    Sexp { magn_sigma2: Hyper, lengthscales: Vec<Hyper> },
    Exp { magn_sigma2: Hyper, lengthscales: Vec<Hyper> },
    Matern32 { magn_sigma2: Hyper, lengthscales: Vec<Hyper> },
    Matern52 { magn_sigma2: Hyper, lengthscales: Vec<Hyper> },
    Rq { magn_sigma2: Hyper, lengthscales: Vec<Hyper>, alpha: Hyper },
    Periodic { magn_sigma2: Hyper, lengthscales: Vec<Hyper>, gamma: Hyper },
    Linear { coeff_sigma2: Vec<Hyper> },
    Constant { magn_sigma2: Hyper },
    /// Arcsine kernel with diagonal weight prior; inputs are augmented with a
    /// leading 1 so `weight_sigma2[0]` is the bias variance.
    NeuralNetwork { weight_sigma2: Vec<Hyper> },
    /// Wendland piecewise polynomial, compactly supported up to the declared
    /// input dimension `dim` (defaults to the number of active inputs).
    Ppcs { q: u8, magn_sigma2: Hyper, lengthscales: Vec<Hyper>, dim: Option<usize> },
    Cat,
    Prod { children: Vec<KernelSpec> },
}

/// A covariance function plus the optional input-dimension subset it acts on.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KernelSpec {
    #[serde(flatten)]
    pub kind: KernelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_variables: Option<Vec<usize>>,
}

/// Symmetric train covariance; compactly supported kernels switch to a
/// compressed triplet representation when the fill fraction drops below 0.5.
#[derive(Clone, Debug)]
pub enum CovMatrix {
    Dense(DMatrix<f64>),
    Sparse { n: usize, triplets: Vec<(usize, usize, f64)> },
}

impl CovMatrix {
    pub fn n(&self) -> usize {
        match self {
            CovMatrix::Dense(m) => m.nrows(),
            CovMatrix::Sparse { n, .. } => *n,
        }
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self, CovMatrix::Sparse { .. })
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            CovMatrix::Dense(m) => m.clone(),
            CovMatrix::Sparse { n, triplets } => {
                let mut m = DMatrix::zeros(*n, *n);
                for &(i, j, v) in triplets {
                    m[(i, j)] = v;
                }
                m
            }
        }
    }

    /// Structural nonzero count (stored entries for sparse, nonzero values
    /// for dense).
    pub fn nnz(&self) -> usize {
        match self {
            CovMatrix::Dense(m) => m.iter().filter(|v| **v != 0.0).count(),
            CovMatrix::Sparse { triplets, .. } => triplets.len(),
        }
    }

    pub fn fill_fraction(&self) -> f64 {
        let n = self.n();
        self.nnz() as f64 / (n * n) as f64
    }

    /// Sorted structural pattern, for sparsity comparisons in tests.
    pub fn pattern(&self) -> Vec<(usize, usize)> {
        let mut p: Vec<(usize, usize)> = match self {
            CovMatrix::Dense(m) => {
                let n = m.nrows();
                (0..n)
                    .flat_map(|i| (0..n).map(move |j| (i, j)))
                    .filter(|&(i, j)| self.to_dense()[(i, j)] != 0.0)
                    .collect()
            }
            CovMatrix::Sparse { triplets, .. } => triplets.iter().map(|&(i, j, _)| (i, j)).collect(),
        };
        p.sort_unstable();
        p
    }
}

impl KernelSpec {
    pub fn new(kind: KernelKind) -> Self {
        KernelSpec { kind, selected_variables: None }
    }

    pub fn with_selected(kind: KernelKind, selected: Vec<usize>) -> Self {
        KernelSpec { kind, selected_variables: Some(selected) }
    }

    /// Indices of the input dimensions this kernel acts on.
    pub fn active_dims(&self, input_dim: usize) -> Vec<usize> {
        match &self.selected_variables {
            Some(s) => s.clone(),
            None => (0..input_dim).collect(),
        }
    }

    pub fn family_name(&self) -> &'static str {
        match &self.kind {
            KernelKind::Sexp { .. } => "sexp",
            KernelKind::Exp { .. } => "exp",
            KernelKind::Matern32 { .. } => "matern32",
            KernelKind::Matern52 { .. } => "matern52",
            KernelKind::Rq { .. } => "rq",
            KernelKind::Periodic { .. } => "periodic",
            KernelKind::Linear { .. } => "linear",
            KernelKind::Constant { .. } => "constant",
            KernelKind::NeuralNetwork { .. } => "neuralnetwork",
            KernelKind::Ppcs { q: 0, .. } => "ppcs0",
            KernelKind::Ppcs { q: 1, .. } => "ppcs1",
            KernelKind::Ppcs { q: 2, .. } => "ppcs2",
            KernelKind::Ppcs { .. } => "ppcs3",
            KernelKind::Cat => "cat",
            KernelKind::Prod { .. } => "prod",
        }
    }

    /// True when the covariance vanishes beyond a finite scaled distance.
    pub fn is_compactly_supported(&self) -> bool {
        match &self.kind {
            KernelKind::Ppcs { .. } => true,
            KernelKind::Prod { children } => children.iter().any(|c| c.is_compactly_supported()),
            _ => false,
        }
    }

    pub fn validate(&self, input_dim: usize) -> Result<()> {
        if let Some(sel) = &self.selected_variables {
            if sel.is_empty() {
                return Err(GpError::validation("kernel_selected", "selectedVariables is empty"));
            }
            let mut seen = vec![false; input_dim];
            for &i in sel {
                if i >= input_dim {
                    return Err(GpError::validation(
                        "kernel_selected",
                        format!("selected variable {i} out of range for input dimension {input_dim}"),
                    ));
                }
                if seen[i] {
                    return Err(GpError::validation("kernel_selected", format!("duplicate selected variable {i}")));
                }
                seen[i] = true;
            }
        }
        let n_active = self.active_dims(input_dim).len();
        let check_positive = |name: &str, h: &Hyper| -> Result<()> {
            if h.value > 0.0 {
                h.prior.validate()
            } else {
                Err(GpError::validation(
                    "kernel_hyper",
                    format!("{}.{name} must be strictly positive, got {}", self.family_name(), h.value),
                ))
            }
        };
        let check_ls = |ls: &[Hyper]| -> Result<()> {
            if ls.len() != 1 && ls.len() != n_active {
                return Err(GpError::validation(
                    "kernel_lengthscales",
                    format!(
                        "{} expects 1 or {n_active} lengthscales, got {}",
                        self.family_name(),
                        ls.len()
                    ),
                ));
            }
            for h in ls {
                check_positive("lengthScale", h)?;
            }
            Ok(())
        };
        match &self.kind {
            KernelKind::Sexp { magn_sigma2, lengthscales }
            | KernelKind::Exp { magn_sigma2, lengthscales }
            | KernelKind::Matern32 { magn_sigma2, lengthscales }
            | KernelKind::Matern52 { magn_sigma2, lengthscales } => {
                check_positive("magnSigma2", magn_sigma2)?;
                check_ls(lengthscales)
            }
            KernelKind::Rq { magn_sigma2, lengthscales, alpha } => {
                check_positive("magnSigma2", magn_sigma2)?;
                check_ls(lengthscales)?;
                check_positive("alpha", alpha)
            }
            KernelKind::Periodic { magn_sigma2, lengthscales, gamma } => {
                check_positive("magnSigma2", magn_sigma2)?;
                check_ls(lengthscales)?;
                check_positive("gamma", gamma)
            }
            KernelKind::Linear { coeff_sigma2 } => {
                if coeff_sigma2.len() != 1 && coeff_sigma2.len() != n_active {
                    return Err(GpError::validation(
                        "kernel_linear",
                        format!("linear expects 1 or {n_active} coefficient variances, got {}", coeff_sigma2.len()),
                    ));
                }
                coeff_sigma2.iter().try_for_each(|h| check_positive("coeffSigma2", h))
            }
            KernelKind::Constant { magn_sigma2 } => check_positive("magnSigma2", magn_sigma2),
            KernelKind::NeuralNetwork { weight_sigma2 } => {
                if weight_sigma2.len() != n_active + 1 {
                    return Err(GpError::validation(
                        "kernel_neuralnetwork",
                        format!(
                            "neuralnetwork expects {} weight variances (bias + per active input), got {}",
                            n_active + 1,
                            weight_sigma2.len()
                        ),
                    ));
                }
                weight_sigma2.iter().try_for_each(|h| check_positive("weightSigma2", h))
            }
            KernelKind::Ppcs { q, magn_sigma2, lengthscales, dim } => {
                if *q > 3 {
                    return Err(GpError::validation("kernel_ppcs", format!("ppcs q must be 0..=3, got {q}")));
                }
                check_positive("magnSigma2", magn_sigma2)?;
                check_ls(lengthscales)?;
                let d = dim.unwrap_or(n_active);
                if d < n_active {
                    return Err(GpError::validation(
                        "kernel_ppcs_dim",
                        format!("ppcs declared dimension {d} is below the {n_active} active inputs"),
                    ));
                }
                Ok(())
            }
            KernelKind::Cat => Ok(()),
            KernelKind::Prod { children } => {
                if children.len() < 2 {
                    return Err(GpError::validation("kernel_prod", "prod requires at least 2 children"));
                }
                children.iter().try_for_each(|c| c.validate(input_dim))
            }
        }
    }

    /// k(x, x') for full-dimension input rows.
    pub fn eval(&self, x: &[f64], x2: &[f64], input_dim: usize) -> Result<f64> {
        if x.len() != input_dim || x2.len() != input_dim {
            return Err(GpError::input(format!(
                "kernel eval expects {input_dim}-dimensional inputs, got {} and {}",
                x.len(),
                x2.len()
            )));
        }
        Ok(self.eval_pair(x, x2, input_dim))
    }

    fn eval_pair(&self, x: &[f64], x2: &[f64], input_dim: usize) -> f64 {
        let active = self.active_dims(input_dim);
        match &self.kind {
            KernelKind::Sexp { magn_sigma2, lengthscales } => {
                let r2 = scaled_sq_dist(x, x2, &active, lengthscales);
                magn_sigma2.value * (-0.5 * r2).exp()
            }
            KernelKind::Exp { magn_sigma2, lengthscales } => {
                let r = scaled_sq_dist(x, x2, &active, lengthscales).sqrt();
                magn_sigma2.value * (-r).exp()
            }
            KernelKind::Matern32 { magn_sigma2, lengthscales } => {
                let r = scaled_sq_dist(x, x2, &active, lengthscales).sqrt();
                let a = 3.0_f64.sqrt() * r;
                magn_sigma2.value * (1.0 + a) * (-a).exp()
            }
            KernelKind::Matern52 { magn_sigma2, lengthscales } => {
                let r2 = scaled_sq_dist(x, x2, &active, lengthscales);
                let r = r2.sqrt();
                let a = 5.0_f64.sqrt() * r;
                magn_sigma2.value * (1.0 + a + 5.0 * r2 / 3.0) * (-a).exp()
            }
            KernelKind::Rq { magn_sigma2, lengthscales, alpha } => {
                let r2 = scaled_sq_dist(x, x2, &active, lengthscales);
                let a = alpha.value;
                magn_sigma2.value * (1.0 + r2 / (2.0 * a)).powf(-a)
            }
            KernelKind::Periodic { magn_sigma2, lengthscales, gamma } => {
                let e = periodic_exponent(x, x2, &active, lengthscales, gamma.value);
                magn_sigma2.value * (-e).exp()
            }
            KernelKind::Linear { coeff_sigma2 } => active
                .iter()
                .enumerate()
                .map(|(k, &d)| coeff(coeff_sigma2, k) * x[d] * x2[d])
                .sum(),
            KernelKind::Constant { magn_sigma2 } => magn_sigma2.value,
            KernelKind::NeuralNetwork { weight_sigma2 } => {
                let s12 = nn_dot(x, x2, &active, weight_sigma2);
                let s11 = nn_dot(x, x, &active, weight_sigma2);
                let s22 = nn_dot(x2, x2, &active, weight_sigma2);
                let u = s12 / ((1.0 + s11) * (1.0 + s22)).sqrt();
                std::f64::consts::FRAC_2_PI * u.clamp(-1.0, 1.0).asin()
            }
            KernelKind::Ppcs { q, magn_sigma2, lengthscales, dim } => {
                let r = scaled_sq_dist(x, x2, &active, lengthscales).sqrt();
                let j = ppcs_j(*q, dim.unwrap_or(active.len()));
                magn_sigma2.value * ppcs_value(*q, j, r)
            }
            KernelKind::Cat => {
                if active.iter().all(|&d| x[d] == x2[d]) {
                    1.0
                } else {
                    0.0
                }
            }
            KernelKind::Prod { children } => {
                children.iter().map(|c| c.eval_pair(x, x2, input_dim)).product()
            }
        }
    }

    /// Pushes d k / d log(theta_j) for every free hyperparameter, in packing
    /// order.
    fn grad_pair(&self, x: &[f64], x2: &[f64], input_dim: usize, out: &mut Vec<f64>) {
        let active = self.active_dims(input_dim);
        match &self.kind {
            KernelKind::Sexp { magn_sigma2, lengthscales } => {
                let k = self.eval_pair(x, x2, input_dim);
                if !magn_sigma2.prior.is_fixed() {
                    out.push(k);
                }
                push_distance_grads(out, lengthscales, x, x2, &active, |d2_over_l2, _r2| k * d2_over_l2);
            }
            KernelKind::Exp { magn_sigma2, lengthscales } => {
                let k = self.eval_pair(x, x2, input_dim);
                let r = scaled_sq_dist(x, x2, &active, lengthscales).sqrt();
                if !magn_sigma2.prior.is_fixed() {
                    out.push(k);
                }
                push_distance_grads(out, lengthscales, x, x2, &active, |d2_over_l2, _| {
                    if r > 0.0 {
                        k * d2_over_l2 / r
                    } else {
                        0.0
                    }
                });
            }
            KernelKind::Matern32 { magn_sigma2, lengthscales } => {
                let k = self.eval_pair(x, x2, input_dim);
                let r = scaled_sq_dist(x, x2, &active, lengthscales).sqrt();
                let m = magn_sigma2.value;
                if !magn_sigma2.prior.is_fixed() {
                    out.push(k);
                }
                let c = 3.0 * m * (-(3.0_f64.sqrt()) * r).exp();
                push_distance_grads(out, lengthscales, x, x2, &active, |d2_over_l2, _| c * d2_over_l2);
            }
            KernelKind::Matern52 { magn_sigma2, lengthscales } => {
                let k = self.eval_pair(x, x2, input_dim);
                let r = scaled_sq_dist(x, x2, &active, lengthscales).sqrt();
                let m = magn_sigma2.value;
                if !magn_sigma2.prior.is_fixed() {
                    out.push(k);
                }
                let c = m * (5.0 / 3.0) * (1.0 + 5.0_f64.sqrt() * r) * (-(5.0_f64.sqrt()) * r).exp();
                push_distance_grads(out, lengthscales, x, x2, &active, |d2_over_l2, _| c * d2_over_l2);
            }
            KernelKind::Rq { magn_sigma2, lengthscales, alpha } => {
                let k = self.eval_pair(x, x2, input_dim);
                let r2 = scaled_sq_dist(x, x2, &active, lengthscales);
                let a = alpha.value;
                let b = r2 / (2.0 * a);
                let m = magn_sigma2.value;
                if !magn_sigma2.prior.is_fixed() {
                    out.push(k);
                }
                let c = m * (1.0 + b).powf(-a - 1.0);
                push_distance_grads(out, lengthscales, x, x2, &active, |d2_over_l2, _| c * d2_over_l2);
                if !alpha.prior.is_fixed() {
                    out.push(k * a * (-(1.0 + b).ln() + b / (1.0 + b)));
                }
            }
            KernelKind::Periodic { magn_sigma2, lengthscales, gamma } => {
                let k = self.eval_pair(x, x2, input_dim);
                let g = gamma.value;
                if !magn_sigma2.prior.is_fixed() {
                    out.push(k);
                }
                if lengthscales.len() == 1 {
                    if !lengthscales[0].prior.is_fixed() {
                        let l2 = lengthscales[0].value * lengthscales[0].value;
                        let s: f64 = active
                            .iter()
                            .map(|&d| {
                                let sp = (std::f64::consts::PI * (x[d] - x2[d]) / g).sin();
                                4.0 * sp * sp / l2
                            })
                            .sum();
                        out.push(k * s);
                    }
                } else {
                    for (kk, &d) in active.iter().enumerate() {
                        if lengthscales[kk].prior.is_fixed() {
                            continue;
                        }
                        let l2 = lengthscales[kk].value * lengthscales[kk].value;
                        let sp = (std::f64::consts::PI * (x[d] - x2[d]) / g).sin();
                        out.push(k * 4.0 * sp * sp / l2);
                    }
                }
                if !gamma.prior.is_fixed() {
                    let s: f64 = active
                        .iter()
                        .enumerate()
                        .map(|(kk, &d)| {
                            let l2 = ls_at(lengthscales, kk).powi(2);
                            let delta = x[d] - x2[d];
                            (2.0 * std::f64::consts::PI * delta / (g * l2))
                                * (2.0 * std::f64::consts::PI * delta / g).sin()
                        })
                        .sum();
                    out.push(k * s);
                }
            }
            KernelKind::Linear { coeff_sigma2 } => {
                if coeff_sigma2.len() == 1 {
                    if !coeff_sigma2[0].prior.is_fixed() {
                        out.push(self.eval_pair(x, x2, input_dim));
                    }
                } else {
                    for (kk, &d) in active.iter().enumerate() {
                        if !coeff_sigma2[kk].prior.is_fixed() {
                            out.push(coeff_sigma2[kk].value * x[d] * x2[d]);
                        }
                    }
                }
            }
            KernelKind::Constant { magn_sigma2 } => {
                if !magn_sigma2.prior.is_fixed() {
                    out.push(magn_sigma2.value);
                }
            }
            KernelKind::NeuralNetwork { weight_sigma2 } => {
                let s12 = nn_dot(x, x2, &active, weight_sigma2);
                let s11 = nn_dot(x, x, &active, weight_sigma2);
                let s22 = nn_dot(x2, x2, &active, weight_sigma2);
                let denom = ((1.0 + s11) * (1.0 + s22)).sqrt();
                let u = (s12 / denom).clamp(-1.0, 1.0);
                let dasin = std::f64::consts::FRAC_2_PI / (1.0 - u * u).max(1e-14).sqrt();
                for q in 0..weight_sigma2.len() {
                    if weight_sigma2[q].prior.is_fixed() {
                        continue;
                    }
                    let xa = if q == 0 { 1.0 } else { x[active[q - 1]] };
                    let xb = if q == 0 { 1.0 } else { x2[active[q - 1]] };
                    let t12 = 2.0 * xa * xb;
                    let t11 = 2.0 * xa * xa;
                    let t22 = 2.0 * xb * xb;
                    let du = (t12 - 0.5 * s12 * (t11 / (1.0 + s11) + t22 / (1.0 + s22))) / denom;
                    out.push(dasin * du * weight_sigma2[q].value);
                }
            }
            KernelKind::Ppcs { q, magn_sigma2, lengthscales, dim } => {
                let r = scaled_sq_dist(x, x2, &active, lengthscales).sqrt();
                let j = ppcs_j(*q, dim.unwrap_or(active.len()));
                let m = magn_sigma2.value;
                if !magn_sigma2.prior.is_fixed() {
                    out.push(m * ppcs_value(*q, j, r));
                }
                let dr = if r < 1.0 && r > 0.0 { -m * ppcs_deriv(*q, j, r) / r } else { 0.0 };
                push_distance_grads(out, lengthscales, x, x2, &active, |d2_over_l2, _| dr * d2_over_l2);
            }
            KernelKind::Cat => {}
            KernelKind::Prod { children } => {
                let vals: Vec<f64> = children.iter().map(|c| c.eval_pair(x, x2, input_dim)).collect();
                for (ci, child) in children.iter().enumerate() {
                    let others: f64 =
                        vals.iter().enumerate().filter(|(i, _)| *i != ci).map(|(_, v)| v).product();
                    let start = out.len();
                    child.grad_pair(x, x2, input_dim, out);
                    for g in out[start..].iter_mut() {
                        *g *= others;
                    }
                }
            }
        }
    }

    /// Number of free (non-fixed-prior) hyperparameters.
    pub fn n_free_params(&self) -> usize {
        self.hyper_views().iter().map(|v| v.values.len()).sum()
    }

    /// Grouped hyperparameter descriptors in packing order. Fixed-prior
    /// parameters are excluded.
    pub fn hyper_views(&self) -> Vec<HyperView> {
        let name = self.family_name();
        let mut views = Vec::new();
        let mut push_group = |label: String, hypers: &[Hyper]| {
            let free: Vec<&Hyper> = hypers.iter().filter(|h| !h.prior.is_fixed()).collect();
            if !free.is_empty() {
                views.push(HyperView {
                    label,
                    values: free.iter().map(|h| h.value).collect(),
                    priors: free.iter().map(|h| h.prior.clone()).collect(),
                });
            }
        };
        match &self.kind {
            KernelKind::Sexp { magn_sigma2, lengthscales }
            | KernelKind::Exp { magn_sigma2, lengthscales }
            | KernelKind::Matern32 { magn_sigma2, lengthscales }
            | KernelKind::Matern52 { magn_sigma2, lengthscales } => {
                push_group(format!("{name}.magnSigma2"), std::slice::from_ref(magn_sigma2));
                push_group(group_label(name, "lengthScale", lengthscales), lengthscales);
            }
            KernelKind::Rq { magn_sigma2, lengthscales, alpha } => {
                push_group(format!("{name}.magnSigma2"), std::slice::from_ref(magn_sigma2));
                push_group(group_label(name, "lengthScale", lengthscales), lengthscales);
                push_group(format!("{name}.alpha"), std::slice::from_ref(alpha));
            }
            KernelKind::Periodic { magn_sigma2, lengthscales, gamma } => {
                push_group(format!("{name}.magnSigma2"), std::slice::from_ref(magn_sigma2));
                push_group(group_label(name, "lengthScale", lengthscales), lengthscales);
                push_group(format!("{name}.gamma"), std::slice::from_ref(gamma));
            }
            KernelKind::Linear { coeff_sigma2 } => {
                push_group(group_label(name, "coeffSigma2", coeff_sigma2), coeff_sigma2);
            }
            KernelKind::Constant { magn_sigma2 } => {
                push_group(format!("{name}.magnSigma2"), std::slice::from_ref(magn_sigma2));
            }
            KernelKind::NeuralNetwork { weight_sigma2 } => {
                push_group(format!("{name}.biasSigma2"), std::slice::from_ref(&weight_sigma2[0]));
                push_group(group_label(name, "weightSigma2", &weight_sigma2[1..]), &weight_sigma2[1..]);
            }
            KernelKind::Ppcs { magn_sigma2, lengthscales, .. } => {
                push_group(format!("{name}.magnSigma2"), std::slice::from_ref(magn_sigma2));
                push_group(group_label(name, "lengthScale", lengthscales), lengthscales);
            }
            KernelKind::Cat => {}
            KernelKind::Prod { children } => {
                for child in children {
                    views.extend(child.hyper_views());
                }
            }
        }
        views
    }

    /// Writes free hyperparameter values back, consuming `values` in packing
    /// order. Returns how many slots were consumed.
    pub fn set_free_params(&mut self, values: &[f64]) -> usize {
        let mut idx = 0;
        let mut assign = |hypers: &mut [Hyper]| {
            for h in hypers.iter_mut().filter(|h| !h.prior.is_fixed()) {
                h.value = values[idx];
                idx += 1;
            }
        };
        match &mut self.kind {
            KernelKind::Sexp { magn_sigma2, lengthscales }
            | KernelKind::Exp { magn_sigma2, lengthscales }
            | KernelKind::Matern32 { magn_sigma2, lengthscales }
            | KernelKind::Matern52 { magn_sigma2, lengthscales } => {
                assign(std::slice::from_mut(magn_sigma2));
                assign(lengthscales);
            }
            KernelKind::Rq { magn_sigma2, lengthscales, alpha } => {
                assign(std::slice::from_mut(magn_sigma2));
                assign(lengthscales);
                assign(std::slice::from_mut(alpha));
            }
            KernelKind::Periodic { magn_sigma2, lengthscales, gamma } => {
                assign(std::slice::from_mut(magn_sigma2));
                assign(lengthscales);
                assign(std::slice::from_mut(gamma));
            }
            KernelKind::Linear { coeff_sigma2 } => assign(coeff_sigma2),
            KernelKind::Constant { magn_sigma2 } => assign(std::slice::from_mut(magn_sigma2)),
            KernelKind::NeuralNetwork { weight_sigma2 } => assign(weight_sigma2),
            KernelKind::Ppcs { magn_sigma2, lengthscales, .. } => {
                assign(std::slice::from_mut(magn_sigma2));
                assign(lengthscales);
            }
            KernelKind::Cat => {}
            KernelKind::Prod { children } => {
                for child in children {
                    idx += child.set_free_params(&values[idx..]);
                }
            }
        }
        idx
    }

    /// Symmetric train covariance matrix.
    pub fn train_matrix(&self, x: &DMatrix<f64>) -> Result<CovMatrix> {
        let (n, d) = (x.nrows(), x.ncols());
        if n == 0 {
            return Err(GpError::input("train matrix needs at least one row"));
        }
        self.validate(d)?;
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            let xi: Vec<f64> = x.row(i).iter().cloned().collect();
            for j in i..n {
                let xj: Vec<f64> = x.row(j).iter().cloned().collect();
                let v = self.eval_pair(&xi, &xj, d);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        crate::linalg::symmetrize(&mut k);
        if self.is_compactly_supported() {
            let nnz = k.iter().filter(|v| **v != 0.0).count();
            if (nnz as f64) < 0.5 * (n * n) as f64 {
                let mut triplets = Vec::with_capacity(nnz);
                for i in 0..n {
                    for j in 0..n {
                        if k[(i, j)] != 0.0 {
                            triplets.push((i, j, k[(i, j)]));
                        }
                    }
                }
                return Ok(CovMatrix::Sparse { n, triplets });
            }
        }
        Ok(CovMatrix::Dense(k))
    }

    /// Cross covariance between two input sets.
    pub fn cross_matrix(&self, x: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let d = x.ncols();
        if x2.ncols() != d {
            return Err(GpError::input(format!(
                "cross matrix input dimensions differ: {d} vs {}",
                x2.ncols()
            )));
        }
        self.validate(d)?;
        let (n, m) = (x.nrows(), x2.nrows());
        let mut k = DMatrix::zeros(n, m);
        for i in 0..n {
            let xi: Vec<f64> = x.row(i).iter().cloned().collect();
            for j in 0..m {
                let xj: Vec<f64> = x2.row(j).iter().cloned().collect();
                k[(i, j)] = self.eval_pair(&xi, &xj, d);
            }
        }
        Ok(k)
    }

    /// Diagonal of the train covariance.
    pub fn diag(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        let d = x.ncols();
        self.validate(d)?;
        let mut v = DVector::zeros(x.nrows());
        for i in 0..x.nrows() {
            let xi: Vec<f64> = x.row(i).iter().cloned().collect();
            v[i] = self.eval_pair(&xi, &xi, d);
        }
        Ok(v)
    }

    /// d K / d log(theta_j) for every free hyperparameter, packing order.
    pub fn train_matrix_grads(&self, x: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
        let (n, d) = (x.nrows(), x.ncols());
        self.validate(d)?;
        let p = self.n_free_params();
        let mut grads = vec![DMatrix::zeros(n, n); p];
        let mut buf = Vec::with_capacity(p);
        for i in 0..n {
            let xi: Vec<f64> = x.row(i).iter().cloned().collect();
            for j in i..n {
                let xj: Vec<f64> = x.row(j).iter().cloned().collect();
                buf.clear();
                self.grad_pair(&xi, &xj, d, &mut buf);
                debug_assert_eq!(buf.len(), p);
                for (g, &v) in grads.iter_mut().zip(&buf) {
                    g[(i, j)] = v;
                    g[(j, i)] = v;
                }
            }
        }
        Ok(grads)
    }

    /// d K(x, x2) / d log(theta_j), packing order.
    pub fn cross_matrix_grads(&self, x: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
        let d = x.ncols();
        self.validate(d)?;
        let p = self.n_free_params();
        let (n, m) = (x.nrows(), x2.nrows());
        let mut grads = vec![DMatrix::zeros(n, m); p];
        let mut buf = Vec::with_capacity(p);
        for i in 0..n {
            let xi: Vec<f64> = x.row(i).iter().cloned().collect();
            for j in 0..m {
                let xj: Vec<f64> = x2.row(j).iter().cloned().collect();
                buf.clear();
                self.grad_pair(&xi, &xj, d, &mut buf);
                for (g, &v) in grads.iter_mut().zip(&buf) {
                    g[(i, j)] = v;
                }
            }
        }
        Ok(grads)
    }

    /// d diag(K) / d log(theta_j), packing order.
    pub fn diag_grads(&self, x: &DMatrix<f64>) -> Result<Vec<DVector<f64>>> {
        let d = x.ncols();
        self.validate(d)?;
        let p = self.n_free_params();
        let n = x.nrows();
        let mut grads = vec![DVector::zeros(n); p];
        let mut buf = Vec::with_capacity(p);
        for i in 0..n {
            let xi: Vec<f64> = x.row(i).iter().cloned().collect();
            buf.clear();
            self.grad_pair(&xi, &xi, d, &mut buf);
            for (g, &v) in grads.iter_mut().zip(&buf) {
                g[i] = v;
            }
        }
        Ok(grads)
    }
}

/// Grouped hyperparameter descriptor used by parameter packing.
#[derive(Clone, Debug)]
pub struct HyperView {
    pub label: String,
    pub values: Vec<f64>,
    pub priors: Vec<PriorSpec>,
}

fn group_label(family: &str, param: &str, hypers: &[Hyper]) -> String {
    let free = hypers.iter().filter(|h| !h.prior.is_fixed()).count();
    if free > 1 {
        format!("{family}.{param} x {free}")
    } else {
        format!("{family}.{param}")
    }
}

fn ls_at(ls: &[Hyper], k: usize) -> f64 {
    if ls.len() == 1 {
        ls[0].value
    } else {
        ls[k].value
    }
}

fn coeff(cs: &[Hyper], k: usize) -> f64 {
    if cs.len() == 1 {
        cs[0].value
    } else {
        cs[k].value
    }
}

fn scaled_sq_dist(x: &[f64], x2: &[f64], active: &[usize], ls: &[Hyper]) -> f64 {
    active
        .iter()
        .enumerate()
        .map(|(k, &d)| {
            let l = ls_at(ls, k);
            let delta = (x[d] - x2[d]) / l;
            delta * delta
        })
        .sum()
}

fn periodic_exponent(x: &[f64], x2: &[f64], active: &[usize], ls: &[Hyper], gamma: f64) -> f64 {
    active
        .iter()
        .enumerate()
        .map(|(k, &d)| {
            let l = ls_at(ls, k);
            let s = (std::f64::consts::PI * (x[d] - x2[d]) / gamma).sin();
            2.0 * s * s / (l * l)
        })
        .sum()
}

fn nn_dot(a: &[f64], b: &[f64], active: &[usize], w: &[Hyper]) -> f64 {
    let mut s = w[0].value; // bias term pairs the augmented 1s
    for (k, &d) in active.iter().enumerate() {
        s += w[k + 1].value * a[d] * b[d];
    }
    2.0 * s
}

/// Lengthscale gradient helper shared by the distance-based families:
/// pushes `per_dim(delta_k^2 / l_k^2)` per ARD slot, or the sum for a shared
/// scalar lengthscale.
fn push_distance_grads<F>(
    out: &mut Vec<f64>,
    lengthscales: &[Hyper],
    x: &[f64],
    x2: &[f64],
    active: &[usize],
    per_dim: F,
) where
    F: Fn(f64, f64) -> f64,
{
    let r2 = scaled_sq_dist(x, x2, active, lengthscales);
    if lengthscales.len() == 1 {
        if !lengthscales[0].prior.is_fixed() {
            out.push(per_dim(r2, r2));
        }
    } else {
        for (k, &d) in active.iter().enumerate() {
            if lengthscales[k].prior.is_fixed() {
                continue;
            }
            let l = lengthscales[k].value;
            let delta = (x[d] - x2[d]) / l;
            out.push(per_dim(delta * delta, r2));
        }
    }
}

fn ppcs_j(q: u8, d: usize) -> f64 {
    (d / 2) as f64 + q as f64 + 1.0
}

fn ppcs_value(q: u8, j: f64, r: f64) -> f64 {
    if r >= 1.0 {
        return 0.0;
    }
    let t = 1.0 - r;
    match q {
        0 => t.powf(j),
        1 => t.powf(j + 1.0) * ((j + 1.0) * r + 1.0),
        2 => {
            t.powf(j + 2.0) * ((j * j + 4.0 * j + 3.0) * r * r + (3.0 * j + 6.0) * r + 3.0) / 3.0
        }
        3 => {
            let c3 = j * j * j + 9.0 * j * j + 23.0 * j + 15.0;
            let c2 = 6.0 * j * j + 36.0 * j + 45.0;
            let c1 = 15.0 * j + 45.0;
            t.powf(j + 3.0) * (c3 * r * r * r + c2 * r * r + c1 * r + 15.0) / 15.0
        }
        _ => unreachable!("ppcs q validated to 0..=3"),
    }
}

fn ppcs_deriv(q: u8, j: f64, r: f64) -> f64 {
    if r >= 1.0 {
        return 0.0;
    }
    let t = 1.0 - r;
    match q {
        0 => -j * t.powf(j - 1.0),
        1 => {
            -(j + 1.0) * t.powf(j) * ((j + 1.0) * r + 1.0) + t.powf(j + 1.0) * (j + 1.0)
        }
        2 => {
            let a = j * j + 4.0 * j + 3.0;
            let b = 3.0 * j + 6.0;
            (-(j + 2.0) * t.powf(j + 1.0) * (a * r * r + b * r + 3.0)
                + t.powf(j + 2.0) * (2.0 * a * r + b))
                / 3.0
        }
        3 => {
            let c3 = j * j * j + 9.0 * j * j + 23.0 * j + 15.0;
            let c2 = 6.0 * j * j + 36.0 * j + 45.0;
            let c1 = 15.0 * j + 45.0;
            (-(j + 3.0) * t.powf(j + 2.0) * (c3 * r * r * r + c2 * r * r + c1 * r + 15.0)
                + t.powf(j + 3.0) * (3.0 * c3 * r * r + 2.0 * c2 * r + c1))
                / 15.0
        }
        _ => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::chol_with_jitter;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn sexp_demo() -> KernelSpec {
        KernelSpec::new(KernelKind::Sexp {
            magn_sigma2: Hyper::new(0.04),
            lengthscales: vec![Hyper::new(1.1), Hyper::new(1.2)],
        })
    }

    fn demo_x() -> DMatrix<f64> {
        DMatrix::from_row_slice(3, 2, &[-1.0, -1.0, 0.0, 0.0, 1.0, 1.0])
    }

    #[test]
    fn sexp_matches_printed_demo_value() {
        let k = sexp_demo();
        let v = k.eval(&[-1.0, -1.0], &[0.0, 0.0], 2).unwrap();
        assert!((v - 0.0187).abs() < 5e-5, "got {v}");
    }

    #[test]
    fn stationary_families_return_magnitude_at_zero_distance() {
        let x = [0.3, -0.4];
        let families: Vec<KernelSpec> = vec![
            sexp_demo(),
            KernelSpec::new(KernelKind::Exp {
                magn_sigma2: Hyper::new(0.7),
                lengthscales: vec![Hyper::new(0.9)],
            }),
            KernelSpec::new(KernelKind::Matern32 {
                magn_sigma2: Hyper::new(1.3),
                lengthscales: vec![Hyper::new(0.5), Hyper::new(2.0)],
            }),
            KernelSpec::new(KernelKind::Matern52 {
                magn_sigma2: Hyper::new(2.1),
                lengthscales: vec![Hyper::new(1.5)],
            }),
            KernelSpec::new(KernelKind::Rq {
                magn_sigma2: Hyper::new(0.9),
                lengthscales: vec![Hyper::new(1.0)],
                alpha: Hyper::new(2.0),
            }),
            KernelSpec::new(KernelKind::Periodic {
                magn_sigma2: Hyper::new(1.1),
                lengthscales: vec![Hyper::new(1.0)],
                gamma: Hyper::new(2.0),
            }),
            KernelSpec::new(KernelKind::Ppcs {
                q: 2,
                magn_sigma2: Hyper::new(0.6),
                lengthscales: vec![Hyper::new(1.0)],
                dim: None,
            }),
        ];
        for k in families {
            let magn = match &k.kind {
                KernelKind::Sexp { magn_sigma2, .. }
                | KernelKind::Exp { magn_sigma2, .. }
                | KernelKind::Matern32 { magn_sigma2, .. }
                | KernelKind::Matern52 { magn_sigma2, .. }
                | KernelKind::Rq { magn_sigma2, .. }
                | KernelKind::Periodic { magn_sigma2, .. }
                | KernelKind::Ppcs { magn_sigma2, .. } => magn_sigma2.value,
                _ => unreachable!(),
            };
            assert_eq!(k.eval(&x, &x, 2).unwrap(), magn, "{}", k.family_name());
        }
    }

    #[test]
    fn ppcs_is_exactly_zero_beyond_unit_scaled_distance() {
        let k = KernelSpec::new(KernelKind::Ppcs {
            q: 2,
            magn_sigma2: Hyper::new(1.0),
            lengthscales: vec![Hyper::new(1.0)],
            dim: None,
        });
        assert_eq!(k.eval(&[0.0], &[1.0], 1).unwrap(), 0.0);
        assert_eq!(k.eval(&[0.0], &[3.7], 1).unwrap(), 0.0);
        assert!(k.eval(&[0.0], &[0.99], 1).unwrap() > 0.0);
    }

    #[test]
    fn train_matrix_matches_printed_demo_matrix() {
        let k = sexp_demo();
        let m = k.train_matrix(&demo_x()).unwrap().to_dense();
        let expect = [
            [0.0400, 0.0187, 0.0019],
            [0.0187, 0.0400, 0.0187],
            [0.0019, 0.0187, 0.0400],
        ];
        for i in 0..3 {
            for j in 0..3 {
                assert!((m[(i, j)] - expect[i][j]).abs() < 5e-5);
            }
        }
    }

    #[test]
    fn constant_kernel_train_matrix_is_all_magnitude() {
        let k = KernelSpec::new(KernelKind::Constant { magn_sigma2: Hyper::new(2.0) });
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 5.0, -2.0]);
        let m = k.train_matrix(&x).unwrap().to_dense();
        assert!(m.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn ppcs_structural_sparsity_matches_pairwise_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100;
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..10.0)).collect();
        let x = DMatrix::from_column_slice(n, 1, &xs);
        let k = KernelSpec::new(KernelKind::Ppcs {
            q: 2,
            magn_sigma2: Hyper::new(1.0),
            lengthscales: vec![Hyper::new(1.0)],
            dim: None,
        });
        let m = k.train_matrix(&x).unwrap();
        assert!(m.is_sparse(), "fill fraction {}", m.fill_fraction());
        // brute-force pairwise distance count
        let mut close = 0usize;
        for i in 0..n {
            for j in 0..n {
                if (xs[i] - xs[j]).abs() < 1.0 {
                    close += 1;
                }
            }
        }
        assert_eq!(m.nnz(), close);
        // pattern symmetric
        let pat = m.pattern();
        for &(i, j) in &pat {
            assert!(pat.binary_search(&(j, i)).is_ok());
        }
    }

    #[test]
    fn cross_matrix_on_same_inputs_reproduces_train_matrix() {
        let k = sexp_demo();
        let x = demo_x();
        let train = k.train_matrix(&x).unwrap().to_dense();
        let cross = k.cross_matrix(&x, &x).unwrap();
        assert_relative_eq!(train, cross, epsilon = 1e-14);
    }

    #[test]
    fn linear_kernel_with_unit_variances_is_dot_product() {
        let k = KernelSpec::new(KernelKind::Linear {
            coeff_sigma2: vec![Hyper::new(1.0), Hyper::new(1.0)],
        });
        let v = k.eval(&[1.0, 2.0], &[3.0, -1.0], 2).unwrap();
        assert_relative_eq!(v, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn categorical_kernel_is_equality_indicator() {
        let k = KernelSpec::new(KernelKind::Cat);
        assert_eq!(k.eval(&[1.0, 2.0], &[1.0, 2.0], 2).unwrap(), 1.0);
        assert_eq!(k.eval(&[1.0, 2.0], &[1.0, 3.0], 2).unwrap(), 0.0);
    }

    #[test]
    fn matern_closed_forms_match_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ls = [0.7, 1.3, 2.2];
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let r = (0..3)
                .map(|k| ((x[k] - y[k]) / ls[k]).powi(2))
                .sum::<f64>()
                .sqrt();
            let hypers = || vec![Hyper::new(0.7), Hyper::new(1.3), Hyper::new(2.2)];
            let m32 = KernelSpec::new(KernelKind::Matern32 {
                magn_sigma2: Hyper::new(1.4),
                lengthscales: hypers(),
            });
            let m52 = KernelSpec::new(KernelKind::Matern52 {
                magn_sigma2: Hyper::new(1.4),
                lengthscales: hypers(),
            });
            let e = KernelSpec::new(KernelKind::Exp {
                magn_sigma2: Hyper::new(1.4),
                lengthscales: hypers(),
            });
            let m32_direct = 1.4 * (1.0 + 3.0_f64.sqrt() * r) * (-(3.0_f64.sqrt()) * r).exp();
            let m52_direct =
                1.4 * (1.0 + 5.0_f64.sqrt() * r + 5.0 * r * r / 3.0) * (-(5.0_f64.sqrt()) * r).exp();
            let e_direct = 1.4 * (-r).exp();
            assert_relative_eq!(m32.eval(&x, &y, 3).unwrap(), m32_direct, epsilon = 1e-12);
            assert_relative_eq!(m52.eval(&x, &y, 3).unwrap(), m52_direct, epsilon = 1e-12);
            assert_relative_eq!(e.eval(&x, &y, 3).unwrap(), e_direct, epsilon = 1e-12);
        }
    }

    #[test]
    fn product_with_unit_constant_is_identity() {
        let base = sexp_demo();
        let prod = KernelSpec::new(KernelKind::Prod {
            children: vec![
                sexp_demo(),
                KernelSpec::new(KernelKind::Constant { magn_sigma2: Hyper::fixed(1.0) }),
            ],
        });
        let x = demo_x();
        let a = base.train_matrix(&x).unwrap().to_dense();
        let b = prod.train_matrix(&x).unwrap().to_dense();
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).abs() < 1e-15);
        }
    }

    fn all_test_kernels() -> Vec<KernelSpec> {
        vec![
            sexp_demo(),
            KernelSpec::new(KernelKind::Exp {
                magn_sigma2: Hyper::new(0.8),
                lengthscales: vec![Hyper::new(1.4)],
            }),
            KernelSpec::new(KernelKind::Matern32 {
                magn_sigma2: Hyper::new(1.2),
                lengthscales: vec![Hyper::new(0.8), Hyper::new(1.6)],
            }),
            KernelSpec::new(KernelKind::Matern52 {
                magn_sigma2: Hyper::new(0.5),
                lengthscales: vec![Hyper::new(1.1)],
            }),
            KernelSpec::new(KernelKind::Rq {
                magn_sigma2: Hyper::new(0.9),
                lengthscales: vec![Hyper::new(0.7), Hyper::new(1.9)],
                alpha: Hyper::new(1.3),
            }),
            KernelSpec::new(KernelKind::Periodic {
                magn_sigma2: Hyper::new(0.6),
                lengthscales: vec![Hyper::new(1.2)],
                gamma: Hyper::new(2.5),
            }),
            KernelSpec::new(KernelKind::Linear {
                coeff_sigma2: vec![Hyper::new(0.5), Hyper::new(1.5)],
            }),
            KernelSpec::new(KernelKind::Constant { magn_sigma2: Hyper::new(0.4) }),
            KernelSpec::new(KernelKind::NeuralNetwork {
                weight_sigma2: vec![Hyper::new(0.3), Hyper::new(0.8), Hyper::new(1.2)],
            }),
            KernelSpec::new(KernelKind::Ppcs {
                q: 2,
                magn_sigma2: Hyper::new(0.7),
                lengthscales: vec![Hyper::new(2.5)],
                dim: None,
            }),
            KernelSpec::new(KernelKind::Prod {
                children: vec![
                    KernelSpec::new(KernelKind::Sexp {
                        magn_sigma2: Hyper::new(0.9),
                        lengthscales: vec![Hyper::new(1.3), Hyper::new(0.9)],
                    }),
                    KernelSpec::new(KernelKind::Matern32 {
                        magn_sigma2: Hyper::new(1.1),
                        lengthscales: vec![Hyper::new(1.8)],
                    }),
                ],
            }),
        ]
    }

    #[test]
    fn train_matrix_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 6;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.gen_range(-1.5..1.5));
        for kernel in all_test_kernels() {
            let p = kernel.n_free_params();
            if p == 0 {
                continue;
            }
            let grads = kernel.train_matrix_grads(&x).unwrap();
            assert_eq!(grads.len(), p);
            for jp in 0..p {
                // bump the jp-th free parameter in log space
                let views = kernel.hyper_views();
                let flat: Vec<f64> = views.iter().flat_map(|v| v.values.clone()).collect();
                let h = 1e-6;
                let mut plus = kernel.clone();
                let mut minus = kernel.clone();
                let mut fp = flat.clone();
                fp[jp] = (flat[jp].ln() + h).exp();
                plus.set_free_params(&fp);
                let mut fm = flat.clone();
                fm[jp] = (flat[jp].ln() - h).exp();
                minus.set_free_params(&fm);
                let kp = plus.train_matrix(&x).unwrap().to_dense();
                let km = minus.train_matrix(&x).unwrap().to_dense();
                let fd = (kp - km) / (2.0 * h);
                let scale = fd.amax().max(1e-8);
                let diff = (&grads[jp] - &fd).amax();
                assert!(
                    diff / scale < 1e-6,
                    "kernel {} param {jp}: rel err {}",
                    kernel.family_name(),
                    diff / scale
                );
            }
        }
    }

    #[test]
    fn magnitude_gradient_of_sexp_is_the_matrix_itself() {
        let k = sexp_demo();
        let x = demo_x();
        let m = k.train_matrix(&x).unwrap().to_dense();
        let g = &k.train_matrix_grads(&x).unwrap()[0];
        assert_relative_eq!(m, g.clone(), epsilon = 1e-14);
    }

    #[test]
    fn constant_kernel_gradient_is_the_matrix() {
        let k = KernelSpec::new(KernelKind::Constant { magn_sigma2: Hyper::new(2.0) });
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let m = k.train_matrix(&x).unwrap().to_dense();
        let g = k.train_matrix_grads(&x).unwrap();
        assert_eq!(g.len(), 1);
        assert_relative_eq!(m, g[0].clone(), epsilon = 1e-14);
    }

    #[test]
    fn every_family_is_positive_semidefinite_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let n = 50;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.gen_range(-2.0..2.0));
        for kernel in all_test_kernels() {
            let k = kernel.train_matrix(&x).unwrap().to_dense();
            chol_with_jitter(&k, 1e-10).unwrap_or_else(|e| {
                panic!("{} not PSD: {e}", kernel.family_name());
            });
        }
        // cat on a coarse grid so duplicates occur
        let xc = DMatrix::from_fn(n, 2, |_, _| rng.gen_range(0..3) as f64);
        let k = KernelSpec::new(KernelKind::Cat).train_matrix(&xc).unwrap().to_dense();
        chol_with_jitter(&k, 1e-10).unwrap();
    }

    #[test]
    fn stationary_families_depend_only_on_scaled_distance() {
        // permuting coordinates together with their lengthscales leaves K unchanged
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 8;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.gen_range(-1.0..1.0));
        let xs = DMatrix::from_fn(n, 2, |i, j| x[(i, 1 - j)]);
        let k1 = KernelSpec::new(KernelKind::Sexp {
            magn_sigma2: Hyper::new(0.5),
            lengthscales: vec![Hyper::new(0.8), Hyper::new(1.7)],
        });
        let k2 = KernelSpec::new(KernelKind::Sexp {
            magn_sigma2: Hyper::new(0.5),
            lengthscales: vec![Hyper::new(1.7), Hyper::new(0.8)],
        });
        let a = k1.train_matrix(&x).unwrap().to_dense();
        let b = k2.train_matrix(&xs).unwrap().to_dense();
        assert_relative_eq!(a, b, epsilon = 1e-15);
    }

    #[test]
    fn selected_variables_restrict_the_distance() {
        let k = KernelSpec::with_selected(
            KernelKind::Sexp { magn_sigma2: Hyper::new(1.0), lengthscales: vec![Hyper::new(1.0)] },
            vec![1],
        );
        // first coordinate differs wildly but is not selected
        let v = k.eval(&[100.0, 0.5], &[-3.0, 0.5], 2).unwrap();
        assert_relative_eq!(v, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let bad_ls = KernelSpec::new(KernelKind::Sexp {
            magn_sigma2: Hyper::new(1.0),
            lengthscales: vec![Hyper::new(-0.5)],
        });
        assert!(bad_ls.validate(1).is_err());

        let bad_sel = KernelSpec::with_selected(
            KernelKind::Sexp { magn_sigma2: Hyper::new(1.0), lengthscales: vec![Hyper::new(1.0)] },
            vec![3],
        );
        assert!(bad_sel.validate(2).is_err());

        let bad_prod = KernelSpec::new(KernelKind::Prod { children: vec![sexp_demo()] });
        assert!(bad_prod.validate(2).is_err());

        let bad_dim = KernelSpec::new(KernelKind::Ppcs {
            q: 1,
            magn_sigma2: Hyper::new(1.0),
            lengthscales: vec![Hyper::new(1.0), Hyper::new(1.0)],
            dim: Some(1),
        });
        assert!(bad_dim.validate(2).is_err());

        let wrong_dim_eval = sexp_demo().eval(&[0.0], &[0.0], 2);
        assert!(wrong_dim_eval.is_err());
    }

    #[test]
    fn fixed_priors_are_skipped_in_packing_and_grads() {
        let k = KernelSpec::new(KernelKind::Sexp {
            magn_sigma2: Hyper::fixed(0.04),
            lengthscales: vec![Hyper::new(1.1), Hyper::new(1.2)],
        });
        assert_eq!(k.n_free_params(), 2);
        let x = demo_x();
        assert_eq!(k.train_matrix_grads(&x).unwrap().len(), 2);
        let views = k.hyper_views();
        assert_eq!(views.len(), 1);
        assert_eq!(views[0].label, "sexp.lengthScale x 2");
    }
}
