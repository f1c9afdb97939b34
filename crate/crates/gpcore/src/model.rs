//! Model assembly and validation: additive kernels, observation model,
//! inference backend, optional mean basis and sparse approximation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::kernels::{CovMatrix, KernelSpec};
use crate::likelihoods::{LikelihoodSpec, ObservationData};
use crate::sparse::SparseSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Exact,
    Laplace,
    Ep,
    Kalman,
}

/// Polynomial basis functions for an explicit mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "dim")]
pub enum BasisFn {
    Constant,
    /// x_d
    Linear(usize),
    /// x_d^2
    Quadratic(usize),
}

impl BasisFn {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            BasisFn::Constant => 1.0,
            BasisFn::Linear(d) => x[d],
            BasisFn::Quadratic(d) => x[d] * x[d],
        }
    }
}

/// Explicit-basis mean function h(x)^T beta with beta ~ N(b, B).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeanBasis {
    pub basis: Vec<BasisFn>,
    /// Prior mean of the weights; ignored when `vague`.
    pub b: Vec<f64>,
    /// Prior covariance of the weights (SPD, row-major); ignored when `vague`.
    pub cov_b: Vec<Vec<f64>>,
    pub vague: bool,
}

impl MeanBasis {
    pub fn vague(basis: Vec<BasisFn>) -> Self {
        let m = basis.len();
        MeanBasis { basis, b: vec![0.0; m], cov_b: vec![vec![0.0; m]; m], vague: true }
    }

    pub fn with_prior(basis: Vec<BasisFn>, b: Vec<f64>, cov_b: Vec<Vec<f64>>) -> Self {
        MeanBasis { basis, b, cov_b, vague: false }
    }

    pub fn len(&self) -> usize {
        self.basis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.is_empty()
    }

    /// H: m x n matrix of basis functions over input rows.
    pub fn h_matrix(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let (n, m) = (x.nrows(), self.len());
        DMatrix::from_fn(m, n, |j, i| {
            let row: Vec<f64> = x.row(i).iter().cloned().collect();
            self.basis[j].eval(&row)
        })
    }

    pub fn b_vector(&self) -> DVector<f64> {
        DVector::from_vec(self.b.clone())
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        let m = self.len();
        DMatrix::from_fn(m, m, |i, j| self.cov_b[i][j])
    }

    fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(GpError::validation("mean_basis", "basis function list is empty"));
        }
        if self.vague {
            return Ok(());
        }
        let m = self.len();
        if self.b.len() != m || self.cov_b.len() != m || self.cov_b.iter().any(|r| r.len() != m) {
            return Err(GpError::validation(
                "mean_basis",
                format!("b and B must have dimension {m} matching the basis"),
            ));
        }
        if crate::linalg::chol_with_jitter(&self.cov_matrix(), 0.0).is_err() {
            return Err(GpError::validation("mean_basis", "prior covariance B is not SPD"));
        }
        Ok(())
    }
}

/// Inputs plus observations.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dataset {
    /// Row-major n x d input matrix.
    pub x: Vec<Vec<f64>>,
    #[serde(flatten)]
    pub obs: ObservationData,
}

impl Dataset {
    pub fn new(x: Vec<Vec<f64>>, obs: ObservationData) -> Self {
        Dataset { x, obs }
    }

    pub fn regression(x: Vec<Vec<f64>>, y: Vec<f64>) -> Self {
        Dataset { x, obs: ObservationData::regression(y) }
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn dim(&self) -> usize {
        self.x.first().map_or(0, |r| r.len())
    }

    pub fn x_matrix(&self) -> DMatrix<f64> {
        let (n, d) = (self.n(), self.dim());
        DMatrix::from_fn(n, d, |i, j| self.x[i][j])
    }

    pub fn y_vector(&self) -> DVector<f64> {
        DVector::from_vec(self.obs.y.clone())
    }

    fn validate(&self) -> Result<()> {
        if self.x.is_empty() {
            return Err(GpError::validation("dataset_empty", "dataset has no rows"));
        }
        let d = self.dim();
        if d == 0 {
            return Err(GpError::validation("dataset_dim", "inputs have zero dimension"));
        }
        if self.x.iter().any(|r| r.len() != d) {
            return Err(GpError::validation("dataset_ragged", "input rows have inconsistent dimension"));
        }
        if self.obs.len() != self.n() {
            return Err(GpError::validation(
                "dataset_targets",
                format!("{} targets for {} input rows", self.obs.len(), self.n()),
            ));
        }
        if self.x.iter().flatten().any(|v| !v.is_finite())
            || self.obs.y.iter().any(|v| !v.is_finite())
        {
            return Err(GpError::validation("dataset_nonfinite", "non-finite value in data"));
        }
        Ok(())
    }
}

/// A Gaussian process model: additive kernels, likelihood, backend and
/// options. Immutable after validation; fits produce separate state objects.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GPModel {
    pub kernels: Vec<KernelSpec>,
    pub likelihood: LikelihoodSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<MeanBasis>,
    pub backend: Backend,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparse: Option<SparseSpec>,
    #[serde(default)]
    pub jitter: f64,
}

impl GPModel {
    pub fn new(kernels: Vec<KernelSpec>, likelihood: LikelihoodSpec, backend: Backend) -> Self {
        GPModel { kernels, likelihood, mean: None, backend, sparse: None, jitter: 0.0 }
    }

    /// Enforces every cross-invariant; returns the model unchanged on success.
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        data.validate()?;
        let d = data.dim();
        if self.kernels.is_empty() {
            return Err(GpError::validation("model_kernels", "at least one kernel is required"));
        }
        for k in &self.kernels {
            k.validate(d)?;
        }
        self.likelihood.validate(&data.obs)?;
        if self.jitter < 0.0 {
            return Err(GpError::validation("model_jitter", "jitter must be nonnegative"));
        }
        match self.backend {
            Backend::Exact => {
                if !self.likelihood.is_gaussian() {
                    return Err(GpError::validation(
                        "backend_exact_likelihood",
                        "the exact backend requires a gaussian likelihood",
                    ));
                }
            }
            Backend::Kalman => {
                if !self.likelihood.is_gaussian() {
                    return Err(GpError::validation(
                        "backend_kalman_likelihood",
                        "the kalman backend requires a gaussian likelihood",
                    ));
                }
                if d != 1 {
                    return Err(GpError::validation(
                        "backend_kalman_dim",
                        format!("the kalman backend requires 1-D inputs, got {d}"),
                    ));
                }
                for k in &self.kernels {
                    crate::statespace::check_kalman_support(k)?;
                }
            }
            Backend::Laplace | Backend::Ep => {}
        }
        if let Some(sparse) = &self.sparse {
            if !self.likelihood.is_gaussian() {
                return Err(GpError::validation(
                    "sparse_likelihood",
                    "sparse approximations support only the gaussian likelihood",
                ));
            }
            if self.backend != Backend::Exact {
                return Err(GpError::validation(
                    "sparse_backend",
                    "sparse approximations run through the exact backend",
                ));
            }
            sparse.validate(self, data)?;
        }
        if let Some(mean) = &self.mean {
            mean.validate()?;
            if self.backend != Backend::Exact || self.sparse.is_some() {
                return Err(GpError::validation(
                    "mean_backend",
                    "mean functions are supported only with the exact dense backend",
                ));
            }
        }
        Ok(())
    }

    /// Sum of kernel train matrices plus jitter on the diagonal. Stays in
    /// compressed form when every kernel is compactly supported and the
    /// combined fill fraction is below one half.
    pub fn total_train_cov(&self, data: &Dataset) -> Result<CovMatrix> {
        let x = data.x_matrix();
        let dense = self.train_cov_of(&x, None)?;
        if self.kernels.iter().all(|k| k.is_compactly_supported()) {
            let n = dense.nrows();
            let nnz = dense.iter().filter(|v| **v != 0.0).count();
            if (nnz as f64) < 0.5 * (n * n) as f64 {
                let mut triplets = Vec::with_capacity(nnz);
                for i in 0..n {
                    for j in 0..n {
                        if dense[(i, j)] != 0.0 {
                            triplets.push((i, j, dense[(i, j)]));
                        }
                    }
                }
                return Ok(CovMatrix::Sparse { n, triplets });
            }
        }
        Ok(CovMatrix::Dense(dense))
    }

    /// Additive covariance over a subset of kernels (`predcf` selection);
    /// jitter is added only for the full sum.
    pub fn train_cov_of(&self, x: &DMatrix<f64>, predcf: Option<&[usize]>) -> Result<DMatrix<f64>> {
        let n = x.nrows();
        let mut total = DMatrix::zeros(n, n);
        for idx in self.component_indices(predcf)? {
            total += self.kernels[idx].train_matrix(x)?.to_dense();
        }
        if predcf.is_none() && self.jitter > 0.0 {
            for i in 0..n {
                total[(i, i)] += self.jitter;
            }
        }
        Ok(total)
    }

    pub fn cross_cov_of(
        &self,
        x: &DMatrix<f64>,
        x2: &DMatrix<f64>,
        predcf: Option<&[usize]>,
    ) -> Result<DMatrix<f64>> {
        let mut total = DMatrix::zeros(x.nrows(), x2.nrows());
        for idx in self.component_indices(predcf)? {
            total += self.kernels[idx].cross_matrix(x, x2)?;
        }
        Ok(total)
    }

    pub fn diag_cov_of(&self, x: &DMatrix<f64>, predcf: Option<&[usize]>) -> Result<DVector<f64>> {
        let mut total = DVector::zeros(x.nrows());
        for idx in self.component_indices(predcf)? {
            total += self.kernels[idx].diag(x)?;
        }
        Ok(total)
    }

    pub fn component_indices(&self, predcf: Option<&[usize]>) -> Result<Vec<usize>> {
        match predcf {
            None => Ok((0..self.kernels.len()).collect()),
            Some(sel) => {
                if self.kernels.len() < 2 {
                    return Err(GpError::input(
                        "component selection (predcf) applies only to additive models",
                    ));
                }
                if sel.is_empty() {
                    return Err(GpError::input("predcf selection is empty"));
                }
                for &i in sel {
                    if i >= self.kernels.len() {
                        return Err(GpError::input(format!(
                            "predcf index {i} out of range for {} kernels",
                            self.kernels.len()
                        )));
                    }
                }
                Ok(sel.to_vec())
            }
        }
    }

    /// Train-covariance gradients w.r.t. log kernel parameters, all kernels
    /// concatenated in declaration order.
    pub fn train_cov_grads(&self, x: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
        let mut out = Vec::new();
        for k in &self.kernels {
            out.extend(k.train_matrix_grads(x)?);
        }
        Ok(out)
    }

    pub fn n_kernel_params(&self) -> usize {
        self.kernels.iter().map(|k| k.n_free_params()).sum()
    }
}
