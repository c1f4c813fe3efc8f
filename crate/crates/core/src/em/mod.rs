//! Expectation–maximization for the cluster-weighted functional mixture.
//!
//! Each cluster models the predictor coefficients with a Gaussian whose
//! W-metric covariance has `d` leading variances `a` and a flat tail `b`, and
//! the response coefficients with a Gaussian linear regression on
//! `c* = (W c_x ; 1)`. The E-step works from per-cluster costs
//! `H_k = −2 log(π_k f_k g_k) + const`, the M-step is closed form.

pub mod fit;
pub mod init;

pub use fit::{fit, CandidateRecord, FitData, FitResult};
pub use init::{init_responsibilities, init_responsibilities_with};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::basis::GramMatrix;
use crate::covariance::{update_sigma_y, ResidualScatter};
use crate::error::{Error, Result};
use crate::matrix_serde::MatrixRepr;
use crate::model::{AShare, ClusterParams, CovStructure, FlmVariant, MixtureModel};
use crate::numerics::{cholesky, log_sum_exp_half_neg, log_sum_exp_weights, solve_spd, sym_eig, EigenDecomposition, SymMatrix};

/// `n × K` posterior membership probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities(DMatrix<f64>);

impl Responsibilities {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.ncols() == 0 {
            return Err(Error::InvalidConfig("responsibilities need at least one cluster".into()));
        }
        for (i, row) in m.row_iter().enumerate() {
            if row.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
                return Err(Error::InvalidConfig(format!("responsibility row {i} has entries outside [0, 1]")));
            }
            let s: f64 = row.sum();
            if (s - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidConfig(format!("responsibility row {i} sums to {s}")));
            }
        }
        Ok(Responsibilities(m))
    }

    /// Hard assignment from 0-based labels.
    pub fn from_labels(labels: &[usize], k: usize) -> Result<Self> {
        let mut m = DMatrix::zeros(labels.len(), k);
        for (i, &l) in labels.iter().enumerate() {
            if l >= k {
                return Err(Error::InvalidConfig(format!("label {l} out of range for K = {k}")));
            }
            m[(i, l)] = 1.0;
        }
        Ok(Responsibilities(m))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn k(&self) -> usize {
        self.0.ncols()
    }
}

impl Serialize for Responsibilities {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MatrixRepr::from(&self.0).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Responsibilities {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let m = MatrixRepr::deserialize(d)?.into_matrix().map_err(serde::de::Error::custom)?;
        Responsibilities::new(m).map_err(serde::de::Error::custom)
    }
}

/// `−(R_X + R_Y)/2 · log 2π + ½ log|W|`, the per-observation constant that
/// turns `−H/2` into a log-density.
pub fn log_lik_constant(r_x: usize, r_y: usize, gram: &GramMatrix) -> f64 {
    -0.5 * (r_x + r_y) as f64 * (2.0 * std::f64::consts::PI).ln() + 0.5 * gram.log_det
}

/// Rows `(W c_x,i ; 1)` for every observation.
pub(crate) fn augmented_design(gram: &GramMatrix, c_x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, r) = c_x.shape();
    let mut d = DMatrix::from_element(n, r + 1, 1.0);
    d.columns_mut(0, r).copy_from(&(c_x * gram.w.matrix()));
    d
}

/// Cluster parameters rearranged for fast cost evaluation.
struct PreparedCluster {
    mu: DVector<f64>,
    /// `W^{1/2} Q`, so that row `(c − μ)ᵀ W^{1/2} Q` gives the subspace scores.
    proj: DMatrix<f64>,
    inv_var: DVector<f64>,
    sigma_chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    gamma_t: DMatrix<f64>,
    base: f64,
}

impl PreparedCluster {
    fn new(p: &ClusterParams, gram: &GramMatrix) -> Result<Self> {
        let rx = p.r_x();
        if !(p.b > 0.0 && p.b.is_finite()) || p.a.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::Degenerate(format!("subspace variances a = {:?}, b = {}", p.a, p.b)));
        }
        if !(p.pi > 0.0) {
            return Err(Error::Degenerate(format!("mixing weight {}", p.pi)));
        }
        let sigma_chol = cholesky(&p.sigma_y).map_err(|_| Error::Degenerate("response covariance is singular".into()))?;
        let logdet_sigma = 2.0 * sigma_chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let inv_var = DVector::from_fn(rx, |l, _| if l < p.d { 1.0 / p.a[l] } else { 1.0 / p.b });
        let base = -2.0 * p.pi.ln()
            + p.a.iter().map(|a| a.ln()).sum::<f64>()
            + (rx - p.d) as f64 * p.b.ln()
            + logdet_sigma;
        Ok(PreparedCluster {
            mu: p.mu_x.clone(),
            proj: gram.sqrt.matrix() * &p.q,
            inv_var,
            sigma_chol,
            gamma_t: p.gamma_star.transpose(),
            base,
        })
    }

    /// Costs for every observation.
    fn costs(&self, c_x: &DMatrix<f64>, c_y: &DMatrix<f64>, design: &DMatrix<f64>) -> DVector<f64> {
        let mut centered = c_x.clone();
        for mut row in centered.row_iter_mut() {
            row -= self.mu.transpose();
        }
        let scores = centered * &self.proj;
        let resid = c_y - design * &self.gamma_t;
        let whitened = self.sigma_chol.l().solve_lower_triangular(&resid.transpose()).expect("triangular factor is non-singular");
        DVector::from_fn(c_x.nrows(), |i, _| {
            let delta: f64 = scores.row(i).iter().zip(self.inv_var.iter()).map(|(z, w)| z * z * w).sum();
            self.base + delta + whitened.column(i).norm_squared()
        })
    }
}

/// `H_k` for a single observation.
pub fn cluster_cost(params: &ClusterParams, gram: &GramMatrix, c_x: &DVector<f64>, c_y: &DVector<f64>) -> Result<f64> {
    if c_x.len() != params.r_x() || c_y.len() != params.r_y() || gram.dim() != params.r_x() {
        return Err(Error::DimMismatch("observation does not match cluster dimensions".into()));
    }
    params.check_shapes()?;
    let prep = PreparedCluster::new(params, gram)?;
    let cx = DMatrix::from_row_slice(1, c_x.len(), c_x.as_slice());
    let cy = DMatrix::from_row_slice(1, c_y.len(), c_y.as_slice());
    Ok(prep.costs(&cx, &cy, &augmented_design(gram, &cx))[0])
}

fn check_data(model: &MixtureModel, c_x: &DMatrix<f64>, c_y: &DMatrix<f64>) -> Result<()> {
    if c_x.nrows() != c_y.nrows() {
        return Err(Error::LengthMismatch(c_x.nrows(), c_y.nrows()));
    }
    if c_x.ncols() != model.r_x() || c_y.ncols() != model.r_y() {
        return Err(Error::DimMismatch(format!(
            "data has R_X = {}, R_Y = {}; model has {} and {}",
            c_x.ncols(),
            c_y.ncols(),
            model.r_x(),
            model.r_y()
        )));
    }
    Ok(())
}

/// `n × K` matrix of costs `H_ik`.
pub fn cost_matrix(model: &MixtureModel, c_x: &DMatrix<f64>, c_y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_data(model, c_x, c_y)?;
    let design = augmented_design(&model.gram_x, c_x);
    let mut out = DMatrix::zeros(c_x.nrows(), model.k());
    for (k, p) in model.clusters.iter().enumerate() {
        let prep = PreparedCluster::new(p, &model.gram_x)?;
        out.set_column(k, &prep.costs(c_x, c_y, &design));
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite cluster cost".into()));
    }
    Ok(out)
}

/// Responsibilities and observed log-likelihood under `model`.
pub fn e_step(model: &MixtureModel, c_x: &DMatrix<f64>, c_y: &DMatrix<f64>) -> Result<(Responsibilities, f64)> {
    let costs = cost_matrix(model, c_x, c_y)?;
    let constant = log_lik_constant(model.r_x(), model.r_y(), &model.gram_x);
    let mut t = DMatrix::zeros(costs.nrows(), costs.ncols());
    let mut loglik = 0.0;
    let mut row_buf = vec![0.0; costs.ncols()];
    for i in 0..costs.nrows() {
        for (k, slot) in row_buf.iter_mut().enumerate() {
            *slot = costs[(i, k)];
        }
        for (k, w) in log_sum_exp_weights(&row_buf).into_iter().enumerate() {
            t[(i, k)] = w;
        }
        loglik += log_sum_exp_half_neg(&row_buf) + constant;
    }
    Ok((Responsibilities(t), loglik))
}

/// Expected complete-data log-likelihood `Σ_i Σ_k t_ik log(π_k f_k g_k)`.
pub fn expected_complete_loglik(
    model: &MixtureModel,
    resp: &Responsibilities,
    c_x: &DMatrix<f64>,
    c_y: &DMatrix<f64>,
) -> Result<f64> {
    let costs = cost_matrix(model, c_x, c_y)?;
    if resp.matrix().shape() != costs.shape() {
        return Err(Error::DimMismatch("responsibilities do not match the model".into()));
    }
    let constant = log_lik_constant(model.r_x(), model.r_y(), &model.gram_x);
    Ok(resp.matrix().zip_fold(&costs, 0.0, |acc, t, h| acc + t * (constant - 0.5 * h)))
}

/// Scree test on one descending eigenvalue list.
pub fn scree_dim(eigvals: &[f64], epsilon: f64) -> usize {
    let gaps: Vec<f64> = eigvals.windows(2).map(|w| w[0] - w[1]).collect();
    let max = gaps.iter().copied().fold(0.0f64, f64::max);
    if !(max > 0.0) {
        return 1;
    }
    gaps.iter().rposition(|&g| g >= epsilon * max).map_or(1, |j| j + 1)
}

pub fn scree_dims(eigvals: &[Vec<f64>], epsilon: f64) -> Vec<usize> {
    eigvals.iter().map(|e| scree_dim(e, epsilon)).collect()
}

/// Subspace part of one cluster's predictor covariance.
#[derive(Debug, Clone)]
struct XStructure {
    q: DMatrix<f64>,
    d: usize,
    a: Vec<f64>,
    b: f64,
}

/// Leading variances and tail variance for the given dimensions, with the
/// variant's sharing rules applied.
fn x_structures(eigs: &[EigenDecomposition], pi: &[f64], dims: &[usize], variant: FlmVariant) -> Result<Vec<XStructure>> {
    let rx = eigs[0].values.len();
    let lead: Vec<Vec<f64>> = eigs.iter().zip(dims).map(|(e, &d)| e.values.iter().take(d).copied().collect()).collect();
    let traces: Vec<f64> = eigs.iter().map(|e| e.values.sum()).collect();

    let common_a = || {
        let num: f64 = lead.iter().zip(pi).map(|(l, p)| p * l.iter().sum::<f64>()).sum();
        let den: f64 = dims.iter().zip(pi).map(|(&d, p)| p * d as f64).sum();
        num / den
    };
    let common_b = || {
        let num: f64 = traces
            .iter()
            .zip(&lead)
            .zip(pi)
            .map(|((tr, l), p)| p * (tr - l.iter().sum::<f64>()))
            .sum();
        let den = rx as f64 - dims.iter().zip(pi).map(|(&d, p)| p * d as f64).sum::<f64>();
        num / den
    };
    let shared_a = (variant.a_share() == AShare::Common).then(common_a);
    let shared_b = variant.common_b().then(common_b);

    eigs.iter()
        .enumerate()
        .map(|(k, e)| {
            let d = dims[k];
            let a = match variant.a_share() {
                AShare::PerDirection => lead[k].clone(),
                AShare::PerCluster => vec![lead[k].iter().sum::<f64>() / d as f64; d],
                AShare::Common => vec![shared_a.unwrap(); d],
            };
            let b = shared_b.unwrap_or_else(|| (traces[k] - lead[k].iter().sum::<f64>()) / (rx - d) as f64);
            if !(b > 1e-300 && b.is_finite()) || a.iter().any(|&x| !(x > 1e-300 && x.is_finite())) {
                return Err(Error::Degenerate(format!("cluster {k}: a = {a:?}, b = {b:e}")));
            }
            Ok(XStructure { q: e.vectors.clone(), d, a, b })
        })
        .collect()
}

/// Predictor part of the expected complete-data log-likelihood (up to
/// constants) for candidate subspace structures, given the W-transformed
/// scatter matrices `M_k = W^{1/2} S_k W^{1/2}`.
fn x_objective(structs: &[XStructure], scatter: &[DMatrix<f64>], n_k: &[f64]) -> f64 {
    structs
        .iter()
        .zip(scatter)
        .zip(n_k)
        .map(|((s, m), &nk)| {
            let rx = m.nrows();
            let mut lead_proj = 0.0;
            let mut acc = 0.0;
            for l in 0..s.d {
                let q = s.q.column(l);
                let lam = q.dot(&(m * q));
                lead_proj += lam;
                acc += s.a[l].ln() + lam / s.a[l];
            }
            acc += (rx - s.d) as f64 * s.b.ln() + (m.trace() - lead_proj) / s.b;
            -0.5 * nk * acc
        })
        .sum()
}

/// Closed-form M-step from responsibilities.
pub fn m_step(
    resp: &Responsibilities,
    gram: &GramMatrix,
    c_x: &DMatrix<f64>,
    c_y: &DMatrix<f64>,
    variant: FlmVariant,
    cov: CovStructure,
    epsilon: f64,
) -> Result<MixtureModel> {
    m_step_guarded(resp, gram, c_x, c_y, variant, cov, epsilon, None)
}

/// M-step that never lowers the expected complete-data log-likelihood below
/// that of `prev`.
///
/// The scree test can change `d_k` between iterations, and the pooled
/// variants can produce `a < b`; in both cases the eigen-based subspace update
/// is no longer guaranteed to improve on the previous one. The predictor
/// structure is therefore chosen among the scree-based update, the same update
/// at the previous dimensions, and the previous structure itself.
#[allow(clippy::too_many_arguments)]
pub fn m_step_guarded(
    resp: &Responsibilities,
    gram: &GramMatrix,
    c_x: &DMatrix<f64>,
    c_y: &DMatrix<f64>,
    variant: FlmVariant,
    cov: CovStructure,
    epsilon: f64,
    prev: Option<&MixtureModel>,
) -> Result<MixtureModel> {
    let (n, rx) = c_x.shape();
    let ry = c_y.ncols();
    let k = resp.k();
    if c_y.nrows() != n || resp.n() != n {
        return Err(Error::LengthMismatch(resp.n(), n));
    }
    if gram.dim() != rx {
        return Err(Error::DimMismatch(format!("W is {0}x{0} but R_X = {rx}", gram.dim())));
    }
    if rx < 2 {
        return Err(Error::InvalidConfig("the subspace model needs R_X >= 2".into()));
    }
    let t = resp.matrix();
    let n_k: Vec<f64> = (0..k).map(|j| t.column(j).sum()).collect();
    for (j, &nk) in n_k.iter().enumerate() {
        if nk < (rx + 1) as f64 {
            return Err(Error::EmptyCluster { cluster: j, weight: nk, min: rx + 1 });
        }
    }
    let pi: Vec<f64> = n_k.iter().map(|nk| nk / n as f64).collect();

    let mut mus = Vec::with_capacity(k);
    let mut scatter_w = Vec::with_capacity(k);
    let mut eigs = Vec::with_capacity(k);
    for (j, &nj) in n_k.iter().enumerate() {
        let tj = t.column(j);
        let mu = c_x.transpose() * tj / nj;
        let mut weighted = c_x.clone();
        for (i, mut row) in weighted.row_iter_mut().enumerate() {
            row -= mu.transpose();
            row *= tj[i].sqrt();
        }
        let s = weighted.transpose() * &weighted / nj;
        let m = SymMatrix::new(gram.sqrt.matrix() * s * gram.sqrt.matrix())?;
        eigs.push(sym_eig(&m)?);
        scatter_w.push(m.into_inner());
        mus.push(mu);
    }

    let eigvals: Vec<Vec<f64>> = eigs.iter().map(|e| e.values.iter().copied().collect()).collect();
    let dims = scree_dims(&eigvals, epsilon);
    let mut chosen = x_structures(&eigs, &pi, &dims, variant);

    if let Some(prev) = prev.filter(|p| p.k() == k && p.r_x() == rx) {
        let mut best_val = chosen.as_ref().map_or(f64::NEG_INFINITY, |s| x_objective(s, &scatter_w, &n_k));
        let prev_dims = prev.dims();
        if prev_dims != dims {
            if let Ok(alt) = x_structures(&eigs, &pi, &prev_dims, variant) {
                let v = x_objective(&alt, &scatter_w, &n_k);
                if v > best_val {
                    best_val = v;
                    chosen = Ok(alt);
                }
            }
        }
        let kept: Vec<XStructure> = prev
            .clusters
            .iter()
            .map(|c| XStructure { q: c.q.clone(), d: c.d, a: c.a.clone(), b: c.b })
            .collect();
        if x_objective(&kept, &scatter_w, &n_k) > best_val {
            chosen = Ok(kept);
        }
    }
    let structs = chosen?;

    // regression: Γ*ᵀ = (Σ t c* c*ᵀ)⁻¹ (Σ t c* c_yᵀ)
    let design = augmented_design(gram, c_x);
    let mut gammas = Vec::with_capacity(k);
    let mut scatters = Vec::with_capacity(k);
    for j in 0..k {
        let tj = t.column(j);
        let mut dw = design.clone();
        let mut yw = c_y.clone();
        for i in 0..n {
            let s = tj[i].sqrt();
            dw.row_mut(i).scale_mut(s);
            yw.row_mut(i).scale_mut(s);
        }
        let gram_d = SymMatrix::new(dw.transpose() * &dw)?;
        let rhs = dw.transpose() * &yw;
        let gamma_t = match solve_spd(&gram_d, &rhs) {
            Ok(g) => g,
            Err(_) => {
                let jitter = 1e-10 * gram_d.trace();
                let m = SymMatrix::new(gram_d.matrix() + DMatrix::identity(rx + 1, rx + 1) * jitter)?;
                solve_spd(&m, &rhs).map_err(|_| Error::SingularDesign)?
            }
        };
        let resid = yw - &dw * &gamma_t;
        scatters.push(SymMatrix::new(resid.transpose() * &resid)?);
        gammas.push(gamma_t.transpose());
    }
    let sigmas = update_sigma_y(cov, &ResidualScatter { s: scatters, n_k: n_k.clone() }, n as f64)?;

    let clusters = structs
        .into_iter()
        .zip(mus)
        .zip(gammas)
        .zip(sigmas)
        .zip(&pi)
        .map(|((((x, mu), g), s), &p)| ClusterParams {
            pi: p,
            mu_x: mu,
            d: x.d,
            q: x.q,
            a: x.a,
            b: x.b,
            gamma_star: g,
            sigma_y: s,
        })
        .collect::<Vec<_>>();
    debug_assert_eq!(clusters.iter().map(|c| c.r_y()).max(), Some(ry));
    Ok(MixtureModel { variant, cov, clusters, gram_x: gram.clone(), basis_x: None, basis_y: None })
}

/// Aitken-extrapolated stopping test; `None` when the trace is too short.
pub fn aitken_test(trace: &[f64]) -> Option<f64> {
    match trace.len() {
        0 | 1 => None,
        2 => Some(trace[1] - trace[0]),
        m => {
            let (l2, l1, l0) = (trace[m - 3], trace[m - 2], trace[m - 1]);
            let denom = l1 - l2;
            if denom == 0.0 {
                return Some(0.0);
            }
            let a = (l0 - l1) / denom;
            let al = l1 + (l0 - l1) / (1.0 - a);
            Some((al - l1).abs())
        }
    }
}

pub fn aitken_converged(trace: &[f64], tol: f64) -> bool {
    aitken_test(trace).is_some_and(|t| t < tol)
}

/// MAP labels (0-based); ties go to the smallest index.
pub fn map_assign(resp: &Responsibilities) -> Vec<usize> {
    resp.matrix()
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn bic(loglik: f64, tau: usize, n: usize) -> f64 {
    loglik - 0.5 * tau as f64 * (n as f64).ln()
}

/// Outcome of one EM run.
#[derive(Debug, Clone)]
pub struct EmState {
    pub model: MixtureModel,
    pub resp: Responsibilities,
    pub loglik_trace: Vec<f64>,
    pub iter: usize,
}

/// Alternates M- and E-steps from `init` until the Aitken test passes or
/// `max_iter` iterations have run.
#[allow(clippy::too_many_arguments)]
pub fn run_em(
    gram: &GramMatrix,
    c_x: &DMatrix<f64>,
    c_y: &DMatrix<f64>,
    variant: FlmVariant,
    cov: CovStructure,
    epsilon: f64,
    max_iter: usize,
    tol: f64,
    init: Responsibilities,
) -> Result<EmState> {
    let mut resp = init;
    let mut trace = Vec::new();
    let mut model: Option<MixtureModel> = None;
    for _ in 0..max_iter {
        let next = m_step_guarded(&resp, gram, c_x, c_y, variant, cov, epsilon, model.as_ref())?;
        let (r, ll) = e_step(&next, c_x, c_y)?;
        if !ll.is_finite() {
            return Err(Error::Degenerate("non-finite log-likelihood".into()));
        }
        resp = r;
        trace.push(ll);
        model = Some(next);
        if aitken_converged(&trace, tol) {
            break;
        }
    }
    let model = model.ok_or_else(|| Error::InvalidConfig("max_iter must be at least 1".into()))?;
    Ok(EmState { iter: trace.len(), model, resp, loglik_trace: trace })
}
