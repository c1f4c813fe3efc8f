//! Response covariance updates for the closed-form parsimonious structures.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::CovStructure;
use crate::numerics::{sym_eig, SymMatrix};

/// Eigenvalue floor below which a response covariance marks a spurious fit.
pub const SPURIOUS_EIGENVALUE: f64 = 1e-20;

/// Unnormalized weighted residual scatter per cluster.
#[derive(Debug, Clone)]
pub struct ResidualScatter {
    pub s: Vec<SymMatrix>,
    pub n_k: Vec<f64>,
}

impl ResidualScatter {
    pub fn k(&self) -> usize {
        self.s.len()
    }

    fn pooled(&self) -> DMatrix<f64> {
        let r = self.s[0].dim();
        self.s.iter().fold(DMatrix::zeros(r, r), |acc, s| acc + s.matrix())
    }
}

fn diagonal_of(m: &DMatrix<f64>, scale: f64) -> SymMatrix {
    let d: Vec<f64> = (0..m.nrows()).map(|i| m[(i, i)] * scale).collect();
    SymMatrix::from_diagonal(&d)
}

/// Clamps round-off negative eigenvalues and rejects collapsed matrices.
fn repair(sigma: SymMatrix) -> Result<SymMatrix> {
    let eig = sym_eig(&sigma)?;
    let max = eig.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max >= 1e-300) {
        return Err(Error::Degenerate(format!("response covariance has max eigenvalue {max:e}")));
    }
    if eig.values.iter().any(|&l| l < 0.0) {
        return Ok(eig.reconstruct_with(|l| l.max(0.0)));
    }
    Ok(sigma)
}

/// Maximizer of the expected complete-data response log-likelihood within the
/// requested structure.
pub fn update_sigma_y(structure: CovStructure, scatter: &ResidualScatter, n: f64) -> Result<Vec<SymMatrix>> {
    if !structure.is_implemented() {
        return Err(Error::Unimplemented(structure.code().into()));
    }
    if scatter.s.len() != scatter.n_k.len() || scatter.s.is_empty() {
        return Err(Error::LengthMismatch(scatter.s.len(), scatter.n_k.len()));
    }
    let r = scatter.s[0].dim();
    let k = scatter.k();
    let shared = |m: SymMatrix| -> Result<Vec<SymMatrix>> {
        let m = repair(m)?;
        Ok(vec![m; k])
    };
    match structure {
        CovStructure::VVV => scatter
            .s
            .iter()
            .zip(&scatter.n_k)
            .map(|(s, &nk)| repair(SymMatrix::new(s.matrix() / nk)?))
            .collect(),
        CovStructure::EEE => shared(SymMatrix::new(scatter.pooled() / n)?),
        CovStructure::VVI => scatter
            .s
            .iter()
            .zip(&scatter.n_k)
            .map(|(s, &nk)| repair(diagonal_of(s.matrix(), 1.0 / nk)))
            .collect(),
        CovStructure::EEI => shared(diagonal_of(&scatter.pooled(), 1.0 / n)),
        CovStructure::VII => scatter
            .s
            .iter()
            .zip(&scatter.n_k)
            .map(|(s, &nk)| repair(SymMatrix::scaled_identity(r, s.trace() / (nk * r as f64))))
            .collect(),
        CovStructure::EII => {
            let tr: f64 = scatter.s.iter().map(|s| s.trace()).sum();
            shared(SymMatrix::scaled_identity(r, tr / (n * r as f64)))
        }
        _ => unreachable!("checked above"),
    }
}

/// True when any response covariance has an eigenvalue below the spurious floor.
pub fn spurious_check(sigmas: &[SymMatrix]) -> bool {
    sigmas.iter().any(|s| match sym_eig(s) {
        Ok(eig) => eig.values.iter().any(|&l| l < SPURIOUS_EIGENVALUE),
        Err(_) => true,
    })
}

/// `Σ_k −½ [n_k log|Σ_k| + tr(Σ_k⁻¹ S_k)]`, the part of the expected
/// complete-data log-likelihood that depends on the response covariances.
pub fn response_objective(sigmas: &[SymMatrix], scatter: &ResidualScatter) -> Result<f64> {
    let mut total = 0.0;
    for ((sigma, s), &nk) in sigmas.iter().zip(&scatter.s).zip(&scatter.n_k) {
        let chol = crate::numerics::cholesky(sigma)?;
        let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let tr = chol.solve(s.matrix()).trace();
        total -= 0.5 * (nk * logdet + tr);
    }
    Ok(total)
}
