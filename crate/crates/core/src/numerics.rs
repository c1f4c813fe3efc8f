//! Small dense symmetric linear algebra.
//!
//! Everything here works on [`SymMatrix`], a square matrix that is exactly
//! symmetric by construction. The eigen-solver is a cyclic Jacobi sweep, which
//! is slow for large inputs but very accurate and deterministic for the
//! handful-of-dozens dimensions used by basis coefficient models.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::matrix_serde::MatrixRepr;

/// A square matrix with `m[(i, j)] == m[(j, i)]` exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Symmetrizes `m` as `(m + mᵀ) / 2`.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimMismatch(format!(
                "symmetric matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let n = m.nrows();
        let mut out = m;
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (out[(i, j)] + out[(j, i)]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        Ok(SymMatrix(out))
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(DMatrix::identity(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        SymMatrix(DMatrix::zeros(n, n))
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        SymMatrix(DMatrix::identity(n, n) * s)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `xᵀ M x`.
    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        let n = self.dim();
        let mut acc = 0.0;
        for j in 0..n {
            let mut col = 0.0;
            for i in 0..n {
                col += self.0[(i, j)] * x[i];
            }
            acc += col * x[j];
        }
        acc
    }
}

impl std::ops::Index<(usize, usize)> for SymMatrix {
    type Output = f64;
    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

impl Serialize for SymMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MatrixRepr::from(&self.0).serialize(s)
    }
}

impl<'de> Deserialize<'de> for SymMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = MatrixRepr::deserialize(d)?;
        let m = repr.into_matrix().map_err(serde::de::Error::custom)?;
        SymMatrix::new(m).map_err(serde::de::Error::custom)
    }
}

/// Eigenpairs of a symmetric matrix, sorted by descending eigenvalue.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub values: DVector<f64>,
    /// Column `j` is the unit eigenvector for `values[j]`.
    pub vectors: DMatrix<f64>,
}

impl EigenDecomposition {
    /// `V · diag(f(values)) · Vᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for j in 0..n {
            let s = f(self.values[j]);
            scaled.column_mut(j).scale_mut(s);
        }
        SymMatrix(symmetrize(scaled * self.vectors.transpose()))
    }
}

fn symmetrize(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

const MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigen-decomposition.
///
/// Eigenvectors follow a fixed sign convention: the first component whose
/// magnitude exceeds 1e-12 is positive.
pub fn sym_eig(m: &SymMatrix) -> Result<EigenDecomposition> {
    if !m.is_finite() {
        return Err(Error::NonFinite);
    }
    let n = m.dim();
    let mut a = m.0.clone();
    let mut v = DMatrix::<f64>::identity(n, n);

    let total: f64 = a.iter().map(|x| x * x).sum();
    if total > 0.0 {
        for _ in 0..MAX_SWEEPS {
            let mut off = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += a[(p, q)] * a[(p, q)];
                }
            }
            if off <= 1e-32 * total {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a[(p, q)];
                    if apq == 0.0 {
                        continue;
                    }
                    let app = a[(p, p)];
                    let aqq = a[(q, q)];
                    // skip rotations below round-off of both diagonal entries
                    if apq.abs() < 1e-300
                        || (apq.abs() * 1e17 < app.abs() && apq.abs() * 1e17 < aqq.abs())
                    {
                        a[(p, q)] = 0.0;
                        a[(q, p)] = 0.0;
                        continue;
                    }
                    let tau = (aqq - app) / (2.0 * apq);
                    let t = if tau.abs() > 1e150 {
                        0.5 / tau
                    } else {
                        let sign = if tau >= 0.0 { 1.0 } else { -1.0 };
                        sign / (tau.abs() + (1.0 + tau * tau).sqrt())
                    };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;
                    for k in 0..n {
                        let vkp = v[(k, p)];
                        let vkq = v[(k, q)];
                        v[(k, p)] = c * vkp - s * vkq;
                        v[(k, q)] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| a[(i, i)]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = v.column(src).into_owned();
        if let Some(first) = col.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                col.neg_mut();
            }
        }
        vectors.set_column(dst, &col);
    }
    Ok(EigenDecomposition { values, vectors })
}

/// Symmetric PSD square root. Round-off negatives are clamped to zero.
pub fn spd_sqrt(m: &SymMatrix) -> Result<SymMatrix> {
    let eig = sym_eig(m)?;
    check_psd(&eig)?;
    Ok(eig.reconstruct_with(|l| l.max(0.0).sqrt()))
}

/// Inverse square root of a positive definite matrix.
pub fn spd_inv_sqrt(m: &SymMatrix) -> Result<SymMatrix> {
    let eig = sym_eig(m)?;
    if eig.values.iter().any(|&l| l <= 1e-300) {
        return Err(Error::NotPd);
    }
    Ok(eig.reconstruct_with(|l| 1.0 / l.sqrt()))
}

fn check_psd(eig: &EigenDecomposition) -> Result<()> {
    let scale = eig.values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if let Some(&low) = eig.values.iter().find(|&&l| l < -1e-10 * scale) {
        return Err(Error::NotPsd(low));
    }
    Ok(())
}

/// Lower Cholesky factor; fails with `NotPd` on a non-positive pivot.
pub fn cholesky(m: &SymMatrix) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if !m.is_finite() {
        return Err(Error::NonFinite);
    }
    let chol = m.0.clone().cholesky().ok_or(Error::NotPd)?;
    if chol.l_dirty().diagonal().iter().any(|&d| !(d > 1e-150)) {
        return Err(Error::NotPd);
    }
    Ok(chol)
}

/// `log |m|` for a symmetric positive definite matrix.
pub fn logdet_spd(m: &SymMatrix) -> Result<f64> {
    let chol = cholesky(m)?;
    Ok(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Solves `m · x = rhs` for symmetric positive definite `m`.
pub fn solve_spd(m: &SymMatrix, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if rhs.nrows() != m.dim() {
        return Err(Error::DimMismatch(format!(
            "rhs has {} rows, matrix is {}x{}",
            rhs.nrows(),
            m.dim(),
            m.dim()
        )));
    }
    let chol = cholesky(m)?;
    Ok(chol.solve(rhs))
}

/// Posterior weights `w_k = 1 / Σ_l exp((c_k − c_l) / 2)` from per-cluster costs.
///
/// Evaluated as a softmax of `−c/2` shifted by the smallest cost, which is the
/// same quantity without overflow.
pub fn log_sum_exp_weights(costs: &[f64]) -> Vec<f64> {
    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = costs.iter().map(|c| (-0.5 * (c - min)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|r| r / total).collect()
}

/// `log Σ_k exp(−c_k / 2)`, computed stably.
pub fn log_sum_exp_half_neg(costs: &[f64]) -> f64 {
    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let total: f64 = costs.iter().map(|c| (-0.5 * (c - min)).exp()).sum();
    -0.5 * min + total.ln()
}
