//! Sparse prior approximations for Gaussian-likelihood inference: FIC, PIC,
//! DTC, SOR, the variational lower bound (VAR) and CS+FIC. Evidence and
//! predictions go through the Woodbury identity on Q + Lambda + sigma^2 I.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::kernels::CovMatrix;
use crate::linalg::{self, LN_2PI};
use crate::model::{Dataset, GPModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SparseKind {
    Fic,
    Pic,
    Dtc,
    Sor,
    Var,
    #[serde(rename = "CS+FIC")]
    CsFic,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SparseSpec {
    pub kind: SparseKind,
    /// Inducing inputs, m x d row-major.
    pub inducing: Vec<Vec<f64>>,
    /// PIC block partition: disjoint index groups covering 0..n.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<Vec<Vec<usize>>>,
    /// Optimize the inducing inputs alongside the hyperparameters.
    #[serde(default)]
    pub optimize_inducing: bool,
}

impl SparseSpec {
    pub fn new(kind: SparseKind, inducing: Vec<Vec<f64>>) -> Self {
        SparseSpec { kind, inducing, blocks: None, optimize_inducing: false }
    }

    pub fn m(&self) -> usize {
        self.inducing.len()
    }

    pub fn inducing_matrix(&self) -> DMatrix<f64> {
        let m = self.inducing.len();
        let d = self.inducing.first().map_or(0, |r| r.len());
        DMatrix::from_fn(m, d, |i, j| self.inducing[i][j])
    }

    pub fn validate(&self, model: &GPModel, data: &Dataset) -> Result<()> {
        if self.inducing.is_empty() {
            return Err(GpError::validation("sparse_inducing", "at least one inducing input required"));
        }
        let d = data.dim();
        if self.inducing.iter().any(|r| r.len() != d) {
            return Err(GpError::validation(
                "sparse_inducing_dim",
                format!("inducing inputs must have dimension {d}"),
            ));
        }
        match self.kind {
            SparseKind::Pic => {
                let blocks = self.blocks.as_ref().ok_or_else(|| {
                    GpError::validation("sparse_pic_blocks", "PIC requires a block partition")
                })?;
                let n = data.n();
                let mut seen = vec![false; n];
                for b in blocks {
                    for &i in b {
                        if i >= n || seen[i] {
                            return Err(GpError::validation(
                                "sparse_pic_partition",
                                "PIC blocks must form a disjoint partition of the data",
                            ));
                        }
                        seen[i] = true;
                    }
                }
                if !seen.iter().all(|&s| s) {
                    return Err(GpError::validation(
                        "sparse_pic_partition",
                        "PIC blocks must cover every data point",
                    ));
                }
            }
            SparseKind::CsFic => {
                let n_cs = model.kernels.iter().filter(|k| k.is_compactly_supported()).count();
                let n_glob = model.kernels.len() - n_cs;
                if n_cs == 0 || n_glob == 0 {
                    return Err(GpError::validation(
                        "sparse_csfic_kernels",
                        "CS+FIC needs at least one global and one compactly supported kernel",
                    ));
                }
            }
            _ => {
                if self.blocks.is_some() {
                    return Err(GpError::validation(
                        "sparse_blocks_unused",
                        "block partition is only meaningful for PIC",
                    ));
                }
            }
        }
        Ok(())
    }
}

/// The (block) diagonal / sparse residual part Lambda of the approximate
/// prior covariance Q + Lambda.
#[derive(Clone, Debug)]
pub enum Lambda {
    Diag(DVector<f64>),
    Blocks { assignment: Vec<Vec<usize>>, blocks: Vec<DMatrix<f64>> },
    /// CS kernel matrix plus a diagonal correction (CS+FIC).
    Sparse { pattern: CovMatrix, dense: DMatrix<f64> },
}

impl Lambda {
    pub fn to_dense(&self, n: usize) -> DMatrix<f64> {
        match self {
            Lambda::Diag(d) => DMatrix::from_diagonal(d),
            Lambda::Blocks { assignment, blocks } => {
                let mut m = DMatrix::zeros(n, n);
                for (idx, b) in assignment.iter().zip(blocks) {
                    for (bi, &i) in idx.iter().enumerate() {
                        for (bj, &j) in idx.iter().enumerate() {
                            m[(i, j)] = b[(bi, bj)];
                        }
                    }
                }
                m
            }
            Lambda::Sparse { dense, .. } => dense.clone(),
        }
    }
}

/// Factorized D = Lambda + sigma^2 I with solve and log-determinant.
struct DFactor {
    n: usize,
    kind: DFactorKind,
}

enum DFactorKind {
    Diag(DVector<f64>),
    Blocks { assignment: Vec<Vec<usize>>, chols: Vec<Cholesky<f64, Dyn>> },
    Dense(Cholesky<f64, Dyn>),
}

impl DFactor {
    fn new(lambda: &Lambda, sigma2: f64, n: usize) -> Result<Self> {
        let kind = match lambda {
            Lambda::Diag(d) => {
                let v = d.map(|x| x + sigma2);
                if v.iter().any(|&x| x <= 0.0) {
                    return Err(GpError::numerical("nonpositive diagonal in sparse residual"));
                }
                DFactorKind::Diag(v)
            }
            Lambda::Blocks { assignment, blocks } => {
                let mut chols = Vec::with_capacity(blocks.len());
                for b in blocks {
                    let mut m = b.clone();
                    for i in 0..m.nrows() {
                        m[(i, i)] += sigma2;
                    }
                    let (c, _) = linalg::chol_with_jitter(&m, 0.0)?;
                    chols.push(c);
                }
                DFactorKind::Blocks { assignment: assignment.clone(), chols }
            }
            Lambda::Sparse { dense, .. } => {
                let mut m = dense.clone();
                for i in 0..n {
                    m[(i, i)] += sigma2;
                }
                let (c, _) = linalg::chol_with_jitter(&m, 0.0)?;
                DFactorKind::Dense(c)
            }
        };
        Ok(DFactor { n, kind })
    }

    fn solve_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            DFactorKind::Diag(d) => v.component_div(d),
            DFactorKind::Blocks { assignment, chols } => {
                let mut out = DVector::zeros(self.n);
                for (idx, c) in assignment.iter().zip(chols) {
                    let sub = DVector::from_fn(idx.len(), |k, _| v[idx[k]]);
                    let sol = c.solve(&sub);
                    for (k, &i) in idx.iter().enumerate() {
                        out[i] = sol[k];
                    }
                }
                out
            }
            DFactorKind::Dense(c) => c.solve(v),
        }
    }

    fn log_det(&self) -> f64 {
        match &self.kind {
            DFactorKind::Diag(d) => d.iter().map(|x| x.ln()).sum(),
            DFactorKind::Blocks { chols, .. } => {
                chols.iter().map(|c| 2.0 * linalg::half_log_det(c)).sum()
            }
            DFactorKind::Dense(c) => 2.0 * linalg::half_log_det(c),
        }
    }

    /// C^{-1} v for D = C C' (lower-triangular half solve).
    fn half_solve_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            DFactorKind::Diag(d) => DVector::from_fn(self.n, |i, _| v[i] / d[i].sqrt()),
            DFactorKind::Blocks { assignment, chols } => {
                let mut out = DVector::zeros(self.n);
                for (idx, c) in assignment.iter().zip(chols) {
                    let sub = DVector::from_fn(idx.len(), |k, _| v[idx[k]]);
                    let sol = c.l_dirty().solve_lower_triangular(&sub).expect("triangular solve");
                    for (k, &i) in idx.iter().enumerate() {
                        out[i] = sol[k];
                    }
                }
                out
            }
            DFactorKind::Dense(c) => {
                c.l_dirty().solve_lower_triangular(v).expect("triangular solve")
            }
        }
    }

    /// C^{-T} v (upper-triangular half solve).
    fn half_solve_t_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            DFactorKind::Diag(d) => DVector::from_fn(self.n, |i, _| v[i] / d[i].sqrt()),
            DFactorKind::Blocks { assignment, chols } => {
                let mut out = DVector::zeros(self.n);
                for (idx, c) in assignment.iter().zip(chols) {
                    let sub = DVector::from_fn(idx.len(), |k, _| v[idx[k]]);
                    let sol = c
                        .l_dirty()
                        .transpose()
                        .solve_upper_triangular(&sub)
                        .expect("triangular solve");
                    for (k, &i) in idx.iter().enumerate() {
                        out[i] = sol[k];
                    }
                }
                out
            }
            DFactorKind::Dense(c) => c
                .l_dirty()
                .transpose()
                .solve_upper_triangular(v)
                .expect("triangular solve"),
        }
    }

    fn half_solve_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(m.nrows(), m.ncols());
        for j in 0..m.ncols() {
            let col = DVector::from_fn(m.nrows(), |i, _| m[(i, j)]);
            out.set_column(j, &self.half_solve_vec(&col));
        }
        out
    }
}

/// Structured pieces of the sparse prior: K_uu, K_fu and the residual.
pub struct SparseComponents {
    pub k_uu: DMatrix<f64>,
    pub k_fu: DMatrix<f64>,
    pub lambda: Lambda,
}

fn split_kernels(model: &GPModel, kind: SparseKind) -> (Vec<usize>, Vec<usize>) {
    match kind {
        SparseKind::CsFic => {
            let mut global = Vec::new();
            let mut cs = Vec::new();
            for (i, k) in model.kernels.iter().enumerate() {
                if k.is_compactly_supported() {
                    cs.push(i);
                } else {
                    global.push(i);
                }
            }
            (global, cs)
        }
        _ => ((0..model.kernels.len()).collect(), Vec::new()),
    }
}

fn sum_cross(model: &GPModel, idx: &[usize], a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(a.nrows(), b.nrows());
    for &i in idx {
        out += model.kernels[i].cross_matrix(a, b)?;
    }
    Ok(out)
}

fn sum_diag(model: &GPModel, idx: &[usize], x: &DMatrix<f64>) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(x.nrows());
    for &i in idx {
        out += model.kernels[i].diag(x)?;
    }
    Ok(out)
}

/// Builds (K_uu, K_fu, Lambda) for the given sparse kind.
pub fn sparse_components(model: &GPModel, data: &Dataset, spec: &SparseSpec) -> Result<SparseComponents> {
    spec.validate(model, data)?;
    let x = data.x_matrix();
    let xu = spec.inducing_matrix();
    let (global, cs) = split_kernels(model, spec.kind);
    let mut k_uu = sum_cross(model, &global, &xu, &xu)?;
    linalg::symmetrize(&mut k_uu);
    let k_fu = sum_cross(model, &global, &x, &xu)?;
    let (kuu_chol, _) = linalg::chol_with_jitter(&k_uu, model.jitter)?;
    let lambda = match spec.kind {
        SparseKind::Dtc | SparseKind::Sor | SparseKind::Var => Lambda::Diag(DVector::zeros(data.n())),
        SparseKind::Fic => {
            let kd = sum_diag(model, &global, &x)?;
            let q_diag = q_diagonal(&k_fu, &kuu_chol);
            Lambda::Diag(kd - q_diag)
        }
        SparseKind::Pic => {
            let assignment = spec.blocks.clone().expect("validated");
            let mut blocks = Vec::with_capacity(assignment.len());
            for idx in &assignment {
                let xb = DMatrix::from_fn(idx.len(), x.ncols(), |i, j| x[(idx[i], j)]);
                let mut kb = sum_cross(model, &global, &xb, &xb)?;
                let kfu_b = DMatrix::from_fn(idx.len(), xu.nrows(), |i, j| k_fu[(idx[i], j)]);
                let qb = &kfu_b * kuu_chol.solve(&kfu_b.transpose());
                kb -= qb;
                linalg::symmetrize(&mut kb);
                blocks.push(kb);
            }
            Lambda::Blocks { assignment, blocks }
        }
        SparseKind::CsFic => {
            let kd = sum_diag(model, &global, &x)?;
            let q_diag = q_diagonal(&k_fu, &kuu_chol);
            let fic_diag = kd - q_diag;
            // CS part evaluated exactly; keep its structural pattern
            let mut cs_total = DMatrix::zeros(data.n(), data.n());
            let mut triplets = Vec::new();
            for &ci in &cs {
                let km = model.kernels[ci].train_matrix(&x)?;
                cs_total += km.to_dense();
            }
            let n = data.n();
            let mut dense = cs_total.clone();
            for i in 0..n {
                dense[(i, i)] += fic_diag[i];
            }
            for i in 0..n {
                for j in 0..n {
                    if cs_total[(i, j)] != 0.0 || i == j {
                        triplets.push((i, j, dense[(i, j)]));
                    }
                }
            }
            Lambda::Sparse { pattern: CovMatrix::Sparse { n, triplets }, dense }
        }
    };
    Ok(SparseComponents { k_uu, k_fu, lambda })
}

fn q_diagonal(k_fu: &DMatrix<f64>, kuu_chol: &Cholesky<f64, Dyn>) -> DVector<f64> {
    // diag(K_fu K_uu^{-1} K_uf) via the Cholesky factor
    let l_inv_kuf = kuu_chol
        .l_dirty()
        .solve_lower_triangular(&k_fu.transpose())
        .expect("triangular solve");
    DVector::from_fn(k_fu.nrows(), |i, _| l_inv_kuf.column(i).norm_squared())
}

fn noise_sigma2(model: &GPModel) -> f64 {
    match &model.likelihood {
        crate::likelihoods::LikelihoodSpec::Gaussian { sigma2 } => sigma2.value,
        _ => unreachable!("sparse models are validated to have a gaussian likelihood"),
    }
}

/// Woodbury pieces shared by evidence, gradient and prediction.
struct WoodburyState {
    d: DFactor,
    a_chol: Cholesky<f64, Dyn>,
    kuu_chol: Cholesky<f64, Dyn>,
    /// S^{-1} y
    alpha: DVector<f64>,
    /// D^{-1} K_fu
    dikfu: DMatrix<f64>,
    comps: SparseComponents,
}

impl WoodburyState {
    fn build(model: &GPModel, data: &Dataset, spec: &SparseSpec) -> Result<Self> {
        let comps = sparse_components(model, data, spec)?;
        let sigma2 = noise_sigma2(model);
        let n = data.n();
        let d = DFactor::new(&comps.lambda, sigma2, n)?;
        let (kuu_chol, _) = linalg::chol_with_jitter(&comps.k_uu, model.jitter)?;
        let dikfu = d.solve_mat(&comps.k_fu);
        let mut a = &comps.k_uu + comps.k_fu.transpose() * &dikfu;
        linalg::symmetrize(&mut a);
        let (a_chol, _) = linalg::chol_with_jitter(&a, 0.0)?;
        let y = data.y_vector();
        let diy = d.solve_vec(&y);
        let b = comps.k_fu.transpose() * &diy;
        let alpha = &diy - &dikfu * a_chol.solve(&b);
        Ok(WoodburyState { d, a_chol, kuu_chol, alpha, dikfu, comps })
    }

    /// S^{-1} v with S = Q + Lambda + sigma^2 I.
    fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        let div = self.d.solve_vec(v);
        let b = self.comps.k_fu.transpose() * &div;
        &div - &self.dikfu * self.a_chol.solve(&b)
    }

    fn log_det(&self) -> f64 {
        self.d.log_det() + 2.0 * linalg::half_log_det(&self.a_chol)
            - 2.0 * linalg::half_log_det(&self.kuu_chol)
    }

    /// Dense S^{-1}, for gradient traces at desk scale.
    fn inv_dense(&self, n: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(n, n);
        for j in 0..n {
            let e = DVector::from_fn(n, |i, _| if i == j { 1.0 } else { 0.0 });
            out.set_column(j, &self.solve(&e));
        }
        linalg::symmetrize(&mut out);
        out
    }
}

/// Approximate log marginal likelihood for the given sparse kind. For VAR
/// this is the variational lower bound.
pub fn sparse_lml(model: &GPModel, data: &Dataset, spec: &SparseSpec) -> Result<f64> {
    let ws = WoodburyState::build(model, data, spec)?;
    let y = data.y_vector();
    let n = data.n() as f64;
    let mut lml = -0.5 * y.dot(&ws.alpha) - 0.5 * ws.log_det() - 0.5 * n * LN_2PI;
    if spec.kind == SparseKind::Var {
        let sigma2 = noise_sigma2(model);
        lml -= trace_k_minus_q(model, data, spec, &ws)? / (2.0 * sigma2);
    }
    Ok(lml)
}

fn trace_k_minus_q(
    model: &GPModel,
    data: &Dataset,
    spec: &SparseSpec,
    ws: &WoodburyState,
) -> Result<f64> {
    let x = data.x_matrix();
    let (global, _) = split_kernels(model, spec.kind);
    let kd = sum_diag(model, &global, &x)?;
    let q_diag = q_diagonal(&ws.comps.k_fu, &ws.kuu_chol);
    Ok((kd - q_diag).sum())
}

/// Analytic gradient of the evidence w.r.t. log kernel parameters followed
/// by the log noise variance (packing order).
pub fn sparse_lml_grad(model: &GPModel, data: &Dataset, spec: &SparseSpec) -> Result<Vec<f64>> {
    let ws = WoodburyState::build(model, data, spec)?;
    let n = data.n();
    let x = data.x_matrix();
    let xu = spec.inducing_matrix();
    let sigma2 = noise_sigma2(model);
    let s_inv = ws.inv_dense(n);
    let alpha = &ws.alpha;
    let kuu_inv_kuf = ws.kuu_chol.solve(&ws.comps.k_fu.transpose()); // m x n
    let (_, cs_set) = split_kernels(model, spec.kind);

    let mut grads = Vec::new();
    for (ki, kernel) in model.kernels.iter().enumerate() {
        let p = kernel.n_free_params();
        if p == 0 {
            continue;
        }
        let is_cs = cs_set.contains(&ki);
        if is_cs {
            // CS kernels live entirely inside Lambda
            let dks = kernel.train_matrix_grads(&x)?;
            for dk in dks {
                grads.push(grad_quad_trace(alpha, &s_inv, &dk));
            }
        } else {
            let dkuu = kernel.train_matrix_grads(&xu)?;
            let dkfu = kernel.cross_matrix_grads(&x, &xu)?;
            let ddiag = kernel.diag_grads(&x)?;
            let need_full = matches!(spec.kind, SparseKind::Pic);
            let dkff_full: Option<Vec<DMatrix<f64>>> =
                if need_full { Some(kernel.train_matrix_grads(&x)?) } else { None };
            for j in 0..p {
                // dQ = dKfu B + B^T dKfu^T - B^T dKuu B, with B = Kuu^{-1} Kuf
                let t1 = &dkfu[j] * &kuu_inv_kuf;
                let mut dq = &t1 + t1.transpose();
                dq -= kuu_inv_kuf.transpose() * &dkuu[j] * &kuu_inv_kuf;
                let mut ds = dq.clone();
                match spec.kind {
                    SparseKind::Fic | SparseKind::CsFic => {
                        // Lambda keeps only the diagonal residual, so the
                        // diagonal of dS is d diag(K) while off-diagonals
                        // come from dQ alone
                        for i in 0..n {
                            ds[(i, i)] += ddiag[j][i] - dq[(i, i)];
                        }
                    }
                    SparseKind::Pic => {
                        let dkff = &dkff_full.as_ref().unwrap()[j];
                        if let Lambda::Blocks { assignment, .. } = &ws.comps.lambda {
                            for idx in assignment {
                                for &a in idx {
                                    for &b in idx {
                                        ds[(a, b)] += dkff[(a, b)] - dq[(a, b)];
                                    }
                                }
                            }
                        }
                    }
                    SparseKind::Dtc | SparseKind::Sor | SparseKind::Var => {}
                }
                let mut g = grad_quad_trace(alpha, &s_inv, &ds);
                if spec.kind == SparseKind::Var {
                    g -= (ddiag[j].sum() - dq.trace()) / (2.0 * sigma2);
                }
                grads.push(g);
            }
        }
    }
    // noise parameter (log sigma2), when free
    if model.likelihood.n_free_params() > 0 {
        let tr_sinv = s_inv.trace();
        let mut g = 0.5 * sigma2 * (alpha.dot(alpha) - tr_sinv);
        if spec.kind == SparseKind::Var {
            g += trace_k_minus_q(model, data, spec, &ws)? / (2.0 * sigma2);
        }
        grads.push(g);
    }
    Ok(grads)
}

fn grad_quad_trace(alpha: &DVector<f64>, s_inv: &DMatrix<f64>, ds: &DMatrix<f64>) -> f64 {
    0.5 * (alpha.transpose() * ds * alpha)[(0, 0)] - 0.5 * (s_inv * ds).trace()
}

/// Central finite differences of the evidence w.r.t. the inducing input
/// coordinates (row-major), used when the inducing inputs are free.
pub fn sparse_lml_inducing_grad_fd(model: &GPModel, data: &Dataset, spec: &SparseSpec) -> Result<Vec<f64>> {
    let m = spec.m();
    let d = data.dim();
    let mut grad = vec![0.0; m * d];
    for i in 0..m {
        for j in 0..d {
            let x0 = spec.inducing[i][j];
            let h = 1e-5 * (1.0 + x0.abs());
            let mut sp = spec.clone();
            sp.inducing[i][j] = x0 + h;
            let fp = sparse_lml(model, data, &sp)?;
            sp.inducing[i][j] = x0 - h;
            let fm = sparse_lml(model, data, &sp)?;
            grad[i * d + j] = (fp - fm) / (2.0 * h);
        }
    }
    Ok(grad)
}

/// Latent predictions under the sparse prior.
#[derive(Clone, Debug)]
pub struct SparsePrediction {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
    /// Number of SOR variances clipped at zero.
    pub clipped: usize,
}

/// Predictive mean/variance at `xt`. PIC requires a block assignment per
/// test point (`test_blocks`).
pub fn sparse_predict(
    model: &GPModel,
    data: &Dataset,
    spec: &SparseSpec,
    xt: &DMatrix<f64>,
    test_blocks: Option<&[usize]>,
) -> Result<SparsePrediction> {
    let ws = WoodburyState::build(model, data, spec)?;
    let x = data.x_matrix();
    let xu = spec.inducing_matrix();
    let nt = xt.nrows();
    let (global, cs_set) = split_kernels(model, spec.kind);

    if spec.kind == SparseKind::Pic {
        let tb = test_blocks.ok_or_else(|| {
            GpError::input("PIC prediction requires a block assignment for every test point")
        })?;
        if tb.len() != nt {
            return Err(GpError::input("test block assignment length mismatch"));
        }
        let nb = spec.blocks.as_ref().expect("validated").len();
        if tb.iter().any(|&b| b >= nb) {
            return Err(GpError::input("test block index out of range"));
        }
    }

    let k_tu = sum_cross(model, &global, xt, &xu)?;
    let kuu_inv_kuf = ws.kuu_chol.solve(&ws.comps.k_fu.transpose()); // m x n
    let q_tf = &k_tu * &kuu_inv_kuf; // nt x n

    let mut mean = DVector::zeros(nt);
    let mut var = DVector::zeros(nt);
    let mut clipped = 0usize;

    for t in 0..nt {
        let xt_row = xt.row(t).clone_owned();
        let xt_mat = DMatrix::from_fn(1, xt.ncols(), |_, j| xt_row[j]);
        // cross covariance row between the test point and training points
        let mut r = DVector::from_fn(data.n(), |i, _| q_tf[(t, i)]);
        match spec.kind {
            SparseKind::Pic => {
                let b = test_blocks.unwrap()[t];
                let idx = &spec.blocks.as_ref().unwrap()[b];
                let k_tf = sum_cross(model, &global, &xt_mat, &x)?;
                for &i in idx {
                    r[i] = k_tf[(0, i)];
                }
            }
            SparseKind::CsFic => {
                let mut k_cs = DMatrix::zeros(1, data.n());
                for &ci in &cs_set {
                    k_cs += model.kernels[ci].cross_matrix(&xt_mat, &x)?;
                }
                for i in 0..data.n() {
                    r[i] += k_cs[(0, i)];
                }
            }
            _ => {}
        }
        // prior variance at the test point
        let v0 = match spec.kind {
            SparseKind::Sor => {
                let kt = ws.kuu_chol.solve(&k_tu.row(t).transpose());
                k_tu.row(t).transpose().dot(&kt)
            }
            SparseKind::CsFic => {
                let mut v = sum_diag(model, &global, &xt_mat)?[0];
                for &ci in &cs_set {
                    v += model.kernels[ci].diag(&xt_mat)?[0];
                }
                v
            }
            _ => sum_diag(model, &global, &xt_mat)?[0],
        };
        let sr = ws.solve(&r);
        mean[t] = r.dot(&ws.alpha);
        let mut v = v0 - r.dot(&sr);
        if v < 0.0 {
            if spec.kind == SparseKind::Sor {
                clipped += 1;
            }
            v = 0.0;
        }
        var[t] = v;
    }
    Ok(SparsePrediction { mean, var, clipped })
}
