//! Command-line front end: `simulate`, `fit` and `evaluate`.
//!
//! Curves are exchanged as long CSV with header `curve_id,dim,t,value`
//! (`dim` is 1-based). Labels are CSV with header `curve_id,label`. Fit results
//! are a single JSON document.

use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSystem, CurveSet, Observations};
use crate::em::{fit, CandidateRecord, FitData, FitResult, Responsibilities};
use crate::error::{Error, Result};
use crate::metrics::ari;
use crate::model::{augmented_predictor, CovStructure, FitConfig, FlmVariant, InitMethod, MixtureModel};
use crate::simulate::{coefficients_to_curves, default_ids, sample_coefficients, ScenarioSpec};

#[derive(Debug, Parser)]
#[command(name = "funweight", version, about = "Cluster-weighted functional linear regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate one of the two synthetic benchmark scenarios.
    Simulate(SimulateArgs),
    /// Smooth paired curves and fit the mixture sweep.
    Fit(Box<FitArgs>),
    /// Adjusted Rand index between two labelings.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, clap::Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 1)]
    scenario: u8,
    #[arg(long, default_value_t = 600)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum BasisArg {
    Bspline,
    Fourier,
}

#[derive(Debug, clap::Args)]
struct FitArgs {
    /// Predictor curves CSV.
    #[arg(long)]
    x: PathBuf,
    /// Response curves CSV.
    #[arg(long)]
    y: PathBuf,
    #[arg(long, value_enum, default_value = "bspline")]
    basis: BasisArg,
    /// Basis functions per curve dimension (odd for Fourier).
    #[arg(long, default_value_t = 6)]
    nbasis: usize,
    /// B-spline order (degree + 1).
    #[arg(long, default_value_t = 4)]
    order: usize,
    /// Cluster counts: `2`, `2..6` (inclusive) or `1,2,3`.
    #[arg(long, default_value = "2")]
    k: String,
    /// Comma-separated variants such as `AkjBk,AB` or `FLM[akj,bk],FLM[a,b]`, or `all`.
    #[arg(long, default_value = "all")]
    variants: String,
    /// Comma-separated covariance codes such as `VII,VVV`, or `all` for every implemented one.
    #[arg(long, default_value = "all")]
    covs: String,
    /// Scree-test threshold in (0, 1).
    #[arg(long, default_value_t = 0.01)]
    epsilon: f64,
    #[arg(long, default_value = "kmeans")]
    init: String,
    #[arg(long, default_value_t = 20)]
    nrep: usize,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Result JSON path.
    #[arg(long)]
    out: PathBuf,
    /// Optional CSV of cluster mean curves for plotting.
    #[arg(long)]
    curves_out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct EvaluateArgs {
    /// Predicted labels: CSV `curve_id,label` or a fit result JSON.
    labels: PathBuf,
    /// Reference labels in the same formats.
    truth: PathBuf,
}

/// Echo of the inputs that produced a result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub x_file: String,
    pub y_file: String,
    pub basis: String,
    pub nbasis: usize,
    pub order: usize,
    pub fit: FitConfig,
}

/// Everything `fit` reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultDocument {
    pub config: ConfigEcho,
    pub best_model_code: String,
    pub k: usize,
    pub bic: f64,
    pub loglik: f64,
    pub n_iter: usize,
    pub tau: usize,
    pub candidates: Vec<CandidateRecord>,
    pub curve_ids: Vec<String>,
    /// 1-based MAP labels, aligned with `curve_ids`.
    pub labels: Vec<usize>,
    pub responsibilities: Responsibilities,
    pub model: MixtureModel,
}

/// Process exit code for an error: 2 for bad input, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Parse(_)
        | Error::Io(_)
        | Error::InvalidCurves(_)
        | Error::InvalidConfig(_)
        | Error::InvalidBasis(_)
        | Error::LengthMismatch(..)
        | Error::UnknownModel(_)
        | Error::Unimplemented(_)
        | Error::OutOfDomain { .. }
        | Error::RankDeficient { .. }
        | Error::DimMismatch(_) => 2,
        _ => 1,
    }
}

/// Parses arguments, runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome = match cli.command {
        Command::Simulate(a) => cmd_simulate(a.scenario, a.n, a.seed, &a.out),
        Command::Fit(a) => with_thread_pool(|| cmd_fit(&a)),
        Command::Evaluate(a) => cmd_evaluate(&a.labels, &a.truth).map(|v| println!("{v:.6}")),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn with_thread_pool(f: impl FnOnce() -> Result<()> + Send) -> Result<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("FUNWEIGHT_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::InvalidConfig(format!("FUNWEIGHT_THREADS must be a positive integer, got `{v}`")))?;
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::InvalidConfig(e.to_string()))?;
    pool.install(f)
}

#[derive(Debug, Deserialize)]
struct CurveRow {
    curve_id: String,
    dim: usize,
    t: f64,
    value: f64,
}

/// Reads long-format curves. Curve order follows first appearance; points are
/// sorted by time within each curve and dimension.
pub fn read_curves(path: &Path) -> Result<CurveSet> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["curve_id", "dim", "t", "value"] {
        return Err(Error::Parse(format!("{}: header must be curve_id,dim,t,value", path.display())));
    }
    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, BTreeMap<usize, Vec<(f64, f64)>>> = HashMap::new();
    let mut max_dim = 0;
    for row in reader.deserialize() {
        let row: CurveRow = row?;
        if row.dim == 0 {
            return Err(Error::Parse(format!("curve {}: dim is 1-based", row.curve_id)));
        }
        max_dim = max_dim.max(row.dim);
        let entry = by_id.entry(row.curve_id.clone()).or_insert_with(|| {
            order.push(row.curve_id.clone());
            BTreeMap::new()
        });
        entry.entry(row.dim).or_default().push((row.t, row.value));
    }
    let mut curves = Vec::with_capacity(order.len());
    for id in &order {
        let dims = by_id.remove(id).expect("id recorded on insert");
        let mut curve = Vec::with_capacity(max_dim);
        for dim in 1..=max_dim {
            let mut pts = dims
                .get(&dim)
                .cloned()
                .ok_or_else(|| Error::InvalidCurves(format!("curve {id} has no observations for dim {dim}")))?;
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            if pts.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::InvalidCurves(format!("curve {id} dim {dim} repeats a time point")));
            }
            let (t, values) = pts.into_iter().unzip();
            curve.push(Observations { t, values });
        }
        curves.push(curve);
    }
    CurveSet::new(order, curves)
}

pub fn write_curves(path: &Path, curves: &CurveSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["curve_id", "dim", "t", "value"])?;
    for (id, curve) in curves.ids.iter().zip(&curves.curves) {
        for (j, obs) in curve.iter().enumerate() {
            for (t, v) in obs.t.iter().zip(&obs.values) {
                w.write_record([id.as_str(), &(j + 1).to_string(), &t.to_string(), &v.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_labels(path: &Path, ids: &[String], labels: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["curve_id", "label"])?;
    for (id, l) in ids.iter().zip(labels) {
        w.write_record([id.as_str(), &l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct LabelsOnly {
    curve_ids: Vec<String>,
    labels: Vec<usize>,
}

/// Reads `(curve_id, label)` pairs from a labels CSV or a result JSON.
pub fn read_labels(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    if text.trim_start().starts_with('{') {
        let doc: LabelsOnly = serde_json::from_str(&text)?;
        if doc.curve_ids.len() != doc.labels.len() {
            return Err(Error::LengthMismatch(doc.curve_ids.len(), doc.labels.len()));
        }
        return Ok(doc.curve_ids.into_iter().zip(doc.labels.into_iter().map(|l| l.to_string())).collect());
    }
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["curve_id", "label"] {
        return Err(Error::Parse(format!("{}: header must be curve_id,label", path.display())));
    }
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        out.push((rec[0].to_string(), rec[1].to_string()));
    }
    Ok(out)
}

/// ARI between two label files joined on curve id.
pub fn cmd_evaluate(labels: &Path, truth: &Path) -> Result<f64> {
    let pred = read_labels(labels)?;
    let truth = read_labels(truth)?;
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    let lookup: HashMap<&str, &str> = truth.iter().map(|(id, l)| (id.as_str(), l.as_str())).collect();
    if lookup.len() != truth.len() {
        return Err(Error::Parse("reference labels repeat a curve id".into()));
    }
    let mut t = Vec::with_capacity(pred.len());
    for (id, _) in &pred {
        t.push(*lookup.get(id.as_str()).ok_or_else(|| Error::Parse(format!("curve {id} missing from reference labels")))?);
    }
    let p: Vec<&str> = pred.iter().map(|(_, l)| l.as_str()).collect();
    ari(&t, &p)
}

#[derive(Serialize)]
struct Manifest<'a> {
    seed: u64,
    spec: &'a ScenarioSpec,
    generating_model: &'a MixtureModel,
}

/// Writes `x.csv`, `y.csv`, `labels.csv` and `manifest.json` into `out`.
pub fn cmd_simulate(scenario: u8, n: usize, seed: u64, out: &Path) -> Result<()> {
    let spec = ScenarioSpec::scenario(scenario, n)?;
    let data = sample_coefficients(&spec, seed)?;
    let model = spec.to_model(seed)?;
    let ids = default_ids(n);
    fs::create_dir_all(out)?;
    let cx = coefficients_to_curves(&data.c_x, &spec.basis_x()?, &spec.grid_x(), &ids)?;
    let cy = coefficients_to_curves(&data.c_y, &spec.basis_y()?, &spec.grid_y(), &ids)?;
    write_curves(&out.join("x.csv"), &cx)?;
    write_curves(&out.join("y.csv"), &cy)?;
    let one_based: Vec<usize> = data.labels.iter().map(|l| l + 1).collect();
    write_labels(&out.join("labels.csv"), &ids, &one_based)?;
    let manifest = Manifest { seed, spec: &spec, generating_model: &model };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// `2`, `2..6` (inclusive) or `1,2,3`.
pub fn parse_k_range(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::InvalidConfig(format!("cannot parse K range `{s}`"));
    let s = s.trim();
    if let Some((lo, hi)) = s.split_once("..") {
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi: usize = hi.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if lo > hi {
            return Err(bad());
        }
        return Ok((lo..=hi).collect());
    }
    let mut ks = s.split(',').map(|p| p.trim().parse::<usize>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?;
    ks.sort_unstable();
    ks.dedup();
    Ok(ks)
}

/// Splits on commas that are not inside square brackets.
fn split_top_level(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for ch in s.chars() {
        match ch {
            '[' => depth += 1,
            ']' => depth -= 1,
            ',' if depth == 0 => {
                out.push(std::mem::take(&mut cur));
                continue;
            }
            _ => {}
        }
        cur.push(ch);
    }
    out.push(cur);
    out.into_iter().map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect()
}

pub fn parse_variants(s: &str) -> Result<Vec<FlmVariant>> {
    if s.trim().eq_ignore_ascii_case("all") {
        return Ok(FlmVariant::ALL.to_vec());
    }
    split_top_level(s).iter().map(|p| p.parse()).collect()
}

pub fn parse_covs(s: &str) -> Result<Vec<CovStructure>> {
    if s.trim().eq_ignore_ascii_case("all") {
        return Ok(CovStructure::IMPLEMENTED.to_vec());
    }
    let covs = split_top_level(s).iter().map(|p| p.parse()).collect::<Result<Vec<CovStructure>>>()?;
    if let Some(c) = covs.iter().find(|c| !c.is_implemented()) {
        return Err(Error::Unimplemented(c.code().into()));
    }
    Ok(covs)
}

/// Reorders `y` to follow the curve order of `x`.
fn align(x: &CurveSet, y: CurveSet) -> Result<CurveSet> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    let mut index: HashMap<&str, usize> = y.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut curves = Vec::with_capacity(x.len());
    for id in &x.ids {
        let i = index
            .remove(id.as_str())
            .ok_or_else(|| Error::InvalidCurves(format!("curve {id} has no response curve")))?;
        curves.push(y.curves[i].clone());
    }
    CurveSet::new(x.ids.clone(), curves)
}

fn build_basis(kind: BasisArg, nbasis: usize, order: usize, curves: &CurveSet) -> Result<BasisSystem> {
    let (lo, hi) = curves
        .time_range()
        .ok_or_else(|| Error::InvalidCurves("no observations".into()))?;
    let counts = vec![nbasis; curves.dims];
    match kind {
        BasisArg::Bspline => BasisSystem::bspline(order, counts, lo, hi),
        BasisArg::Fourier => BasisSystem::fourier(counts, lo, hi, None),
    }
}

fn fit_args_config(a: &FitArgs) -> Result<FitConfig> {
    let cfg = FitConfig {
        k_range: parse_k_range(&a.k)?,
        variants: parse_variants(&a.variants)?,
        covs: parse_covs(&a.covs)?,
        epsilon: a.epsilon,
        init: a.init.parse::<InitMethod>()?,
        n_rep: a.nrep,
        max_iter: a.max_iter,
        tol: a.tol,
        seed: a.seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Builds the result document for a finished fit.
pub fn result_document(config: ConfigEcho, ids: Vec<String>, res: FitResult) -> ResultDocument {
    ResultDocument {
        config,
        best_model_code: res.best_model.code().to_string(),
        k: res.best_model.k(),
        bic: res.bic,
        loglik: res.loglik,
        n_iter: res.n_iter,
        tau: res.tau,
        candidates: res.candidate_table,
        curve_ids: ids,
        labels: res.labels.iter().map(|l| l + 1).collect(),
        responsibilities: res.resp,
        model: res.best_model,
    }
}

fn cmd_fit(a: &FitArgs) -> Result<()> {
    let cfg = fit_args_config(a)?;
    let x = read_curves(&a.x)?;
    let y = align(&x, read_curves(&a.y)?)?;
    let bx = build_basis(a.basis, a.nbasis, a.order, &x)?;
    let by = build_basis(a.basis, a.nbasis, a.order, &y)?;
    let data = FitData::from_curves(&x, &y, bx, by)?;
    let res = fit(&data, &cfg)?;
    let echo = ConfigEcho {
        x_file: a.x.display().to_string(),
        y_file: a.y.display().to_string(),
        basis: format!("{:?}", a.basis).to_lowercase(),
        nbasis: a.nbasis,
        order: a.order,
        fit: cfg,
    };
    let doc = result_document(echo, x.ids.clone(), res);
    fs::write(&a.out, serde_json::to_string_pretty(&doc)?)?;
    if let Some(path) = &a.curves_out {
        write_mean_curves(path, &doc.model)?;
    }
    let mut out = std::io::stdout().lock();
    writeln!(out, "best model: {} with K = {}", doc.best_model_code, doc.k)?;
    writeln!(out, "BIC = {:.4}, log-likelihood = {:.4}, iterations = {}", doc.bic, doc.loglik, doc.n_iter)?;
    writeln!(out, "result written to {}", a.out.display())?;
    Ok(())
}

const PLOT_POINTS: usize = 101;

/// Cluster mean curves on a fine grid: predictor means `ξ_X μ_X` and response
/// means `ξ_Y Γ* (W μ_X ; 1)`.
pub fn write_mean_curves(path: &Path, model: &MixtureModel) -> Result<()> {
    let (Some(bx), Some(by)) = (&model.basis_x, &model.basis_y) else {
        return Err(Error::InvalidConfig("model carries no bases to evaluate".into()));
    };
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["cluster", "curve", "dim", "t", "value"])?;
    for (k, c) in model.clusters.iter().enumerate() {
        let mean_y = &c.gamma_star * augmented_predictor(&model.gram_x, &c.mu_x);
        for (name, basis, coef) in [("x", bx, &c.mu_x), ("y", by, &mean_y)] {
            let (lo, hi) = basis.domain;
            for p in 0..PLOT_POINTS {
                let t = lo + (hi - lo) * p as f64 / (PLOT_POINTS - 1) as f64;
                let values = basis.eval_block(t)? * coef;
                for (j, v) in values.iter().enumerate() {
                    w.write_record([
                        (k + 1).to_string(),
                        name.to_string(),
                        (j + 1).to_string(),
                        t.to_string(),
                        v.to_string(),
                    ])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}
