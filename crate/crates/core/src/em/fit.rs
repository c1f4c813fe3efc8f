//! The multi-restart model sweep and BIC selection.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{bic, init_responsibilities_with, map_assign, run_em, EmState, Responsibilities};
use crate::basis::{gram, smooth, BasisSystem, CurveSet, GramMatrix};
use crate::covariance::spurious_check;
use crate::error::{Error, Result};
use crate::model::{CovStructure, FitConfig, FlmVariant, MixtureModel, ModelCode};
use crate::rng;

/// Coefficient data ready for fitting.
#[derive(Debug, Clone)]
pub struct FitData {
    pub c_x: DMatrix<f64>,
    pub c_y: DMatrix<f64>,
    pub gram: GramMatrix,
    pub basis_x: Option<BasisSystem>,
    pub basis_y: Option<BasisSystem>,
}

impl FitData {
    pub fn from_coefficients(c_x: DMatrix<f64>, c_y: DMatrix<f64>, gram: GramMatrix) -> Result<Self> {
        if c_x.nrows() != c_y.nrows() {
            return Err(Error::LengthMismatch(c_x.nrows(), c_y.nrows()));
        }
        if c_x.ncols() != gram.dim() {
            return Err(Error::DimMismatch(format!("C_X has {} columns, W is {1}x{1}", c_x.ncols(), gram.dim())));
        }
        Ok(FitData { c_x, c_y, gram, basis_x: None, basis_y: None })
    }

    /// Smooths both curve sets (which must list the same curves in the same
    /// order) and builds the predictor Gram matrix.
    pub fn from_curves(x: &CurveSet, y: &CurveSet, basis_x: BasisSystem, basis_y: BasisSystem) -> Result<Self> {
        if x.ids != y.ids {
            return Err(Error::InvalidCurves("predictor and response curves do not list the same ids".into()));
        }
        let c_x = smooth(x, &basis_x)?.values;
        let c_y = smooth(y, &basis_y)?.values;
        let w = gram(&basis_x)?;
        Ok(FitData { c_x, c_y, gram: w, basis_x: Some(basis_x), basis_y: Some(basis_y) })
    }

    pub fn n(&self) -> usize {
        self.c_x.nrows()
    }
}

/// Best restart of one (K, variant, covariance) combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub k: usize,
    pub variant: FlmVariant,
    pub cov: CovStructure,
    pub code: String,
    pub bic: Option<f64>,
    pub loglik: Option<f64>,
    pub n_iter: Option<usize>,
    pub tau: Option<usize>,
    pub dims: Option<Vec<usize>>,
    pub best_rep: Option<usize>,
    /// No restart survived and at least one was discarded as spurious.
    pub spurious: bool,
    pub n_spurious: usize,
    pub n_failed: usize,
    pub last_error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub best_model: MixtureModel,
    /// 0-based MAP labels.
    pub labels: Vec<usize>,
    pub resp: Responsibilities,
    pub bic: f64,
    pub loglik: f64,
    pub n_iter: usize,
    pub tau: usize,
    pub loglik_trace: Vec<f64>,
    pub candidate_table: Vec<CandidateRecord>,
}

enum Outcome {
    Viable { state: Box<EmState>, bic: f64, tau: usize },
    Spurious,
    Failed(String),
}

fn run_one(data: &FitData, cfg: &FitConfig, init: &Result<Responsibilities>, variant: FlmVariant, cov: CovStructure) -> Outcome {
    let init = match init {
        Ok(r) => r.clone(),
        Err(e) => return Outcome::Failed(e.to_string()),
    };
    let state = match run_em(&data.gram, &data.c_x, &data.c_y, variant, cov, cfg.epsilon, cfg.max_iter, cfg.tol, init) {
        Ok(s) => s,
        Err(e) => return Outcome::Failed(e.to_string()),
    };
    let sigmas: Vec<_> = state.model.clusters.iter().map(|c| c.sigma_y.clone()).collect();
    if spurious_check(&sigmas) {
        return Outcome::Spurious;
    }
    let tau = match state.model.free_params() {
        Ok(t) => t,
        Err(e) => return Outcome::Failed(e.to_string()),
    };
    let loglik = *state.loglik_trace.last().expect("at least one iteration");
    Outcome::Viable { bic: bic(loglik, tau, data.n()), tau, state: Box::new(state) }
}

/// Runs every (K, restart, variant, covariance) combination and keeps the
/// model with the largest BIC.
pub fn fit(data: &FitData, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let n = data.n();
    let k_max = *cfg.k_range.iter().max().expect("validated non-empty");
    if n <= k_max {
        return Err(Error::InvalidConfig(format!("need more than {k_max} observations, got {n}")));
    }

    let starts: Vec<(usize, usize)> = cfg.k_range.iter().flat_map(|&k| (0..cfg.n_rep).map(move |r| (k, r))).collect();
    let inits: Vec<Result<Responsibilities>> = starts
        .par_iter()
        .map(|&(k, rep)| {
            let mut rng = rng::stream(cfg.seed, &[rng::tag::INIT, k as u64, rep as u64]);
            init_responsibilities_with(cfg.init, &data.c_x, &data.c_y, k, &mut rng)
        })
        .collect();

    // (K index, variant, cov, rep); reps of one combination are contiguous
    let mut tasks = Vec::new();
    for ki in 0..cfg.k_range.len() {
        for &v in &cfg.variants {
            for &c in &cfg.covs {
                for rep in 0..cfg.n_rep {
                    tasks.push((ki, v, c, rep));
                }
            }
        }
    }
    let outcomes: Vec<Outcome> = tasks
        .par_iter()
        .map(|&(ki, v, c, rep)| run_one(data, cfg, &inits[ki * cfg.n_rep + rep], v, c))
        .collect();

    let mut table = Vec::new();
    let mut best: Option<(f64, usize, usize, EmState)> = None;
    let mut outcomes = outcomes.into_iter();
    for chunk in tasks.chunks(cfg.n_rep) {
        let (ki, variant, cov, _) = chunk[0];
        let k = cfg.k_range[ki];
        let mut rec = CandidateRecord {
            k,
            variant,
            cov,
            code: ModelCode { variant, cov }.to_string(),
            bic: None,
            loglik: None,
            n_iter: None,
            tau: None,
            dims: None,
            best_rep: None,
            spurious: false,
            n_spurious: 0,
            n_failed: 0,
            last_error: None,
        };
        let mut group_best: Option<(f64, usize, EmState)> = None;
        for rep in 0..chunk.len() {
            match outcomes.next().expect("one outcome per task") {
                Outcome::Viable { state, bic, tau } => {
                    if group_best.as_ref().is_none_or(|(b, _, _)| bic > *b) {
                        rec.bic = Some(bic);
                        rec.loglik = state.loglik_trace.last().copied();
                        rec.n_iter = Some(state.iter);
                        rec.tau = Some(tau);
                        rec.dims = Some(state.model.dims());
                        rec.best_rep = Some(rep);
                        group_best = Some((bic, tau, *state));
                    }
                }
                Outcome::Spurious => rec.n_spurious += 1,
                Outcome::Failed(msg) => {
                    rec.n_failed += 1;
                    rec.last_error = Some(msg);
                }
            }
        }
        rec.spurious = group_best.is_none() && rec.n_spurious > 0;
        if let Some((b, tau, state)) = group_best {
            let better = match &best {
                None => true,
                Some((bb, bt, bk, _)) => b > *bb || (b == *bb && (tau < *bt || (tau == *bt && k < *bk))),
            };
            if better {
                best = Some((b, tau, k, state));
            }
        }
        table.push(rec);
    }

    let (bic_best, tau, _, state) = best.ok_or(Error::NoViableModel)?;
    let mut model = state.model;
    model.basis_x = data.basis_x.clone();
    model.basis_y = data.basis_y.clone();
    Ok(FitResult {
        labels: map_assign(&state.resp),
        loglik: *state.loglik_trace.last().expect("non-empty trace"),
        n_iter: state.iter,
        loglik_trace: state.loglik_trace,
        resp: state.resp,
        best_model: model,
        bic: bic_best,
        tau,
        candidate_table: table,
    })
}
