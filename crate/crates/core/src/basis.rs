//! Function bases, least-squares smoothing of sampled curves, and the Gram
//! matrix of basis inner products.
//!
//! A [`BasisSystem`] carries one block of basis functions per curve dimension.
//! Coefficient rows are laid out block after block in dimension order, so a
//! `p`-variate curve with `R_j` functions in dimension `j` becomes one row of
//! length `R = Σ_j R_j`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::matrix_serde::MatrixRepr;
use crate::numerics::{solve_spd, sym_eig, SymMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum BasisKind {
    /// B-splines of the given order (degree + 1), one knot vector per dimension.
    Bspline { order: usize, knots: Vec<Vec<f64>> },
    /// Orthonormal Fourier basis: constant, then sin/cos pairs.
    Fourier { period: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSystem {
    pub kind: BasisKind,
    pub counts: Vec<usize>,
    pub domain: (f64, f64),
}

impl BasisSystem {
    /// Clamped cubic-style B-splines: boundary knots repeated `order` times,
    /// interior knots uniform over the domain.
    pub fn bspline(order: usize, counts: Vec<usize>, t_min: f64, t_max: f64) -> Result<Self> {
        check_domain(t_min, t_max)?;
        if order < 2 {
            return Err(Error::InvalidBasis(format!("order must be >= 2, got {order}")));
        }
        let knots = counts
            .iter()
            .map(|&r| {
                if r < order {
                    return Err(Error::InvalidBasis(format!(
                        "B-spline count {r} is below the order {order}"
                    )));
                }
                Ok(clamped_uniform_knots(order, r, t_min, t_max))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::bspline_with_knots(order, knots, t_min, t_max)
    }

    pub fn bspline_with_knots(
        order: usize,
        knots: Vec<Vec<f64>>,
        t_min: f64,
        t_max: f64,
    ) -> Result<Self> {
        check_domain(t_min, t_max)?;
        if order < 2 {
            return Err(Error::InvalidBasis(format!("order must be >= 2, got {order}")));
        }
        if knots.is_empty() {
            return Err(Error::InvalidBasis("no dimensions".into()));
        }
        let mut counts = Vec::with_capacity(knots.len());
        for k in &knots {
            if k.windows(2).any(|w| !(w[0] <= w[1])) {
                return Err(Error::InvalidBasis("knots must be non-decreasing".into()));
            }
            if k.len() < 2 * order {
                return Err(Error::InvalidBasis(format!(
                    "{} knots cannot support order {order}",
                    k.len()
                )));
            }
            let r = k.len() - order;
            if (k[order - 1] - t_min).abs() > 1e-12 * (t_max - t_min)
                || (k[r] - t_max).abs() > 1e-12 * (t_max - t_min)
            {
                return Err(Error::InvalidBasis(
                    "knot vector does not span the domain".into(),
                ));
            }
            counts.push(r);
        }
        Ok(BasisSystem {
            kind: BasisKind::Bspline { order, knots },
            counts,
            domain: (t_min, t_max),
        })
    }

    /// Fourier basis; `period` defaults to the domain length.
    pub fn fourier(counts: Vec<usize>, t_min: f64, t_max: f64, period: Option<f64>) -> Result<Self> {
        check_domain(t_min, t_max)?;
        if counts.is_empty() {
            return Err(Error::InvalidBasis("no dimensions".into()));
        }
        if let Some(bad) = counts.iter().find(|&&r| r % 2 == 0) {
            return Err(Error::InvalidBasis(format!("Fourier count must be odd, got {bad}")));
        }
        let period = period.unwrap_or(t_max - t_min);
        if !(period > 0.0) {
            return Err(Error::InvalidBasis("Fourier period must be positive".into()));
        }
        Ok(BasisSystem { kind: BasisKind::Fourier { period }, counts, domain: (t_min, t_max) })
    }

    pub fn dims(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Starting column of each dimension block.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.counts
            .iter()
            .map(|&r| {
                let o = acc;
                acc += r;
                o
            })
            .collect()
    }

    fn clamp_to_domain(&self, t: f64) -> Result<f64> {
        let (lo, hi) = self.domain;
        let slack = 1e-10 * (hi - lo);
        if !(t >= lo - slack && t <= hi + slack) {
            return Err(Error::OutOfDomain { t, min: lo, max: hi });
        }
        Ok(t.clamp(lo, hi))
    }

    /// Values of the `R_dim` basis functions of dimension `dim` at `t`.
    pub fn eval(&self, dim: usize, t: f64) -> Result<Vec<f64>> {
        if dim >= self.dims() {
            return Err(Error::DimMismatch(format!(
                "dimension {dim} out of range for {}-dimensional basis",
                self.dims()
            )));
        }
        let t = self.clamp_to_domain(t)?;
        let r = self.counts[dim];
        match &self.kind {
            BasisKind::Bspline { order, knots } => Ok(bspline_values(&knots[dim], *order, r, t)),
            BasisKind::Fourier { period } => {
                Ok(fourier_terms(r, *period).iter().map(|f| f.eval(t - self.domain.0)).collect())
            }
        }
    }

    /// The `p × R` block matrix ξ(t): row `j` holds dimension `j`'s values in its
    /// own column block and zeros elsewhere.
    pub fn eval_block(&self, t: f64) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.dims(), self.total());
        for (j, off) in self.offsets().into_iter().enumerate() {
            for (r, v) in self.eval(j, t)?.into_iter().enumerate() {
                out[(j, off + r)] = v;
            }
        }
        Ok(out)
    }
}

/// Free-function form of [`BasisSystem::eval`].
pub fn eval_basis(b: &BasisSystem, dim: usize, t: f64) -> Result<Vec<f64>> {
    b.eval(dim, t)
}

fn check_domain(t_min: f64, t_max: f64) -> Result<()> {
    if !(t_min.is_finite() && t_max.is_finite() && t_min < t_max) {
        return Err(Error::InvalidBasis(format!("invalid domain [{t_min}, {t_max}]")));
    }
    Ok(())
}

pub(crate) fn clamped_uniform_knots(order: usize, count: usize, t_min: f64, t_max: f64) -> Vec<f64> {
    let interior = count - order;
    let mut knots = Vec::with_capacity(count + order);
    knots.extend(std::iter::repeat_n(t_min, order));
    let step = (t_max - t_min) / (interior + 1) as f64;
    for i in 1..=interior {
        knots.push(t_min + step * i as f64);
    }
    knots.extend(std::iter::repeat_n(t_max, order));
    knots
}

/// All `count` B-spline values at `t` using the triangular Cox–de Boor scheme.
fn bspline_values(knots: &[f64], order: usize, count: usize, t: f64) -> Vec<f64> {
    let degree = order - 1;
    // last non-empty span with knots[i] <= t; t == right end belongs to the final span
    let mut span = degree;
    for i in (degree..count).rev() {
        if knots[i] <= t && knots[i] < knots[i + 1] {
            span = i;
            break;
        }
    }
    let mut local = vec![0.0; order];
    let mut left = vec![0.0; order];
    let mut right = vec![0.0; order];
    local[0] = 1.0;
    for j in 1..=degree {
        left[j] = t - knots[span + 1 - j];
        right[j] = knots[span + j] - t;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom != 0.0 { local[r] / denom } else { 0.0 };
            local[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        local[j] = saved;
    }
    let mut out = vec![0.0; count];
    for (r, v) in local.into_iter().enumerate() {
        out[span - degree + r] = v;
    }
    out
}

/// `amp · sin(ω x)` or `amp · cos(ω x)` with `x = t − t_min`.
#[derive(Debug, Clone, Copy)]
struct Harmonic {
    amp: f64,
    omega: f64,
    sine: bool,
}

impl Harmonic {
    fn eval(&self, x: f64) -> f64 {
        if self.sine {
            self.amp * (self.omega * x).sin()
        } else {
            self.amp * (self.omega * x).cos()
        }
    }

    /// Phase in the `cos(ω x + φ)` form used by the Gram integrals.
    fn phase(&self) -> f64 {
        if self.sine {
            -PI / 2.0
        } else {
            0.0
        }
    }
}

fn fourier_terms(count: usize, period: f64) -> Vec<Harmonic> {
    let mut out = Vec::with_capacity(count);
    out.push(Harmonic { amp: 1.0 / period.sqrt(), omega: 0.0, sine: false });
    let amp = (2.0 / period).sqrt();
    let mut freq = 1;
    while out.len() < count {
        let omega = 2.0 * PI * freq as f64 / period;
        out.push(Harmonic { amp, omega, sine: true });
        if out.len() < count {
            out.push(Harmonic { amp, omega, sine: false });
        }
        freq += 1;
    }
    out
}

/// `∫_0^len cos(α x + β) dx`.
fn cos_integral(alpha: f64, beta: f64, len: f64) -> f64 {
    if alpha == 0.0 {
        len * beta.cos()
    } else {
        ((alpha * len + beta).sin() - beta.sin()) / alpha
    }
}

/// Gauss–Legendre nodes and weights on [-1, 1].
pub(crate) fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 0 { 1.0 } else if n == 1 { x } else { p1 };
            let pm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * p - pm1) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Inner-product matrix W and its symmetric square roots.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    pub w: SymMatrix,
    pub sqrt: SymMatrix,
    pub inv_sqrt: SymMatrix,
    /// `log |W|`.
    pub log_det: f64,
}

impl GramMatrix {
    pub fn from_w(w: SymMatrix) -> Result<Self> {
        let eig = sym_eig(&w)?;
        if eig.values.iter().any(|&l| !(l > 1e-300)) {
            return Err(Error::NotPd);
        }
        Ok(GramMatrix {
            sqrt: eig.reconstruct_with(f64::sqrt),
            inv_sqrt: eig.reconstruct_with(|l| 1.0 / l.sqrt()),
            log_det: eig.values.iter().map(|l| l.ln()).sum(),
            w,
        })
    }

    pub fn identity(n: usize) -> Self {
        GramMatrix {
            w: SymMatrix::identity(n),
            sqrt: SymMatrix::identity(n),
            inv_sqrt: SymMatrix::identity(n),
            log_det: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.w.dim()
    }
}

impl Serialize for GramMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MatrixRepr::from(self.w.matrix()).serialize(s)
    }
}

impl<'de> Deserialize<'de> for GramMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let w = SymMatrix::deserialize(d)?;
        GramMatrix::from_w(w).map_err(serde::de::Error::custom)
    }
}

/// Block-diagonal matrix of `∫ ξ_r ξ_s` over the domain.
pub fn gram(b: &BasisSystem) -> Result<GramMatrix> {
    let total = b.total();
    let mut w = DMatrix::zeros(total, total);
    let (lo, hi) = b.domain;
    for (dim, off) in b.offsets().into_iter().enumerate() {
        let r = b.counts[dim];
        match &b.kind {
            BasisKind::Bspline { order, knots } => {
                let (nodes, weights) = gauss_legendre(order + 1);
                let k = &knots[dim];
                for span in 0..k.len() - 1 {
                    let (a, c) = (k[span].max(lo), k[span + 1].min(hi));
                    if !(c > a) {
                        continue;
                    }
                    let half = 0.5 * (c - a);
                    let mid = 0.5 * (c + a);
                    for (x, wt) in nodes.iter().zip(&weights) {
                        let vals = bspline_values(k, *order, r, mid + half * x);
                        for i in 0..r {
                            if vals[i] == 0.0 {
                                continue;
                            }
                            for j in 0..r {
                                w[(off + i, off + j)] += half * wt * vals[i] * vals[j];
                            }
                        }
                    }
                }
            }
            BasisKind::Fourier { period } => {
                let terms = fourier_terms(r, *period);
                let len = hi - lo;
                for i in 0..r {
                    for j in 0..r {
                        let (f, g) = (terms[i], terms[j]);
                        w[(off + i, off + j)] = 0.5
                            * f.amp
                            * g.amp
                            * (cos_integral(f.omega - g.omega, f.phase() - g.phase(), len)
                                + cos_integral(f.omega + g.omega, f.phase() + g.phase(), len));
                    }
                }
            }
        }
    }
    GramMatrix::from_w(SymMatrix::new(w)?)
}

/// Sampled values of one curve component.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    pub t: Vec<f64>,
    pub values: Vec<f64>,
}

/// `n` discretely observed `p`-variate curves; grids may differ per curve and
/// per dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSet {
    pub ids: Vec<String>,
    pub dims: usize,
    pub curves: Vec<Vec<Observations>>,
}

impl CurveSet {
    pub fn new(ids: Vec<String>, curves: Vec<Vec<Observations>>) -> Result<Self> {
        if ids.len() != curves.len() {
            return Err(Error::LengthMismatch(ids.len(), curves.len()));
        }
        let dims = curves.first().map(|c| c.len()).unwrap_or(0);
        for (id, curve) in ids.iter().zip(&curves) {
            if curve.len() != dims {
                return Err(Error::InvalidCurves(format!(
                    "curve {id} has {} dimensions, expected {dims}",
                    curve.len()
                )));
            }
            for (j, obs) in curve.iter().enumerate() {
                if obs.t.len() != obs.values.len() {
                    return Err(Error::InvalidCurves(format!(
                        "curve {id} dim {}: {} times but {} values",
                        j + 1,
                        obs.t.len(),
                        obs.values.len()
                    )));
                }
                if obs.t.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(Error::InvalidCurves(format!(
                        "curve {id} dim {}: grid is not strictly increasing",
                        j + 1
                    )));
                }
                if obs.t.iter().chain(&obs.values).any(|v| !v.is_finite()) {
                    return Err(Error::InvalidCurves(format!("curve {id} has non-finite data")));
                }
            }
        }
        Ok(CurveSet { ids, dims, curves })
    }

    pub fn len(&self) -> usize {
        self.curves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.curves.is_empty()
    }

    /// Smallest and largest observation time over all curves.
    pub fn time_range(&self) -> Option<(f64, f64)> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for obs in self.curves.iter().flatten() {
            if let (Some(a), Some(b)) = (obs.t.first(), obs.t.last()) {
                lo = lo.min(*a);
                hi = hi.max(*b);
            }
        }
        (lo <= hi).then_some((lo, hi))
    }
}

/// `n × R` basis coefficients, one row per curve, dimension blocks in order.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMatrix {
    pub values: DMatrix<f64>,
    pub blocks: Vec<usize>,
}

impl CoefficientMatrix {
    pub fn new(values: DMatrix<f64>, blocks: Vec<usize>) -> Result<Self> {
        if blocks.iter().sum::<usize>() != values.ncols() {
            return Err(Error::DimMismatch(format!(
                "blocks sum to {} but matrix has {} columns",
                blocks.iter().sum::<usize>(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(CoefficientMatrix { values, blocks })
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }
}

const RANK_TOL: f64 = 1e-13;
const JITTER_COND: f64 = 1e-10;

fn smooth_one(obs: &Observations, b: &BasisSystem, dim: usize) -> Result<Vec<f64>> {
    let r = b.counts[dim];
    let m = obs.t.len();
    if m < r {
        return Err(Error::RankDeficient { rank: m, needed: r });
    }
    let mut design = DMatrix::zeros(m, r);
    for (row, &t) in obs.t.iter().enumerate() {
        for (col, v) in b.eval(dim, t)?.into_iter().enumerate() {
            design[(row, col)] = v;
        }
    }
    let y = DVector::from_column_slice(&obs.values);
    let normal = SymMatrix::new(design.transpose() * &design)?;
    let rhs = design.transpose() * y;

    let eig = sym_eig(&normal)?;
    let max = eig.values[0];
    let min = eig.values[r - 1];
    let rank = eig.values.iter().filter(|&&l| l > RANK_TOL * max).count();
    if rank < r {
        return Err(Error::RankDeficient { rank, needed: r });
    }
    let system = if min < JITTER_COND * max {
        let jitter = 1e-10 * normal.trace();
        SymMatrix::new(normal.matrix() + DMatrix::identity(r, r) * jitter)?
    } else {
        normal
    };
    let sol = solve_spd(&system, &DMatrix::from_column_slice(r, 1, rhs.as_slice()))
        .map_err(|_| Error::RankDeficient { rank, needed: r })?;
    Ok(sol.iter().copied().collect())
}

/// Least-squares basis coefficients for every curve, dimension by dimension.
pub fn smooth(curves: &CurveSet, b: &BasisSystem) -> Result<CoefficientMatrix> {
    if curves.dims != b.dims() && !curves.is_empty() {
        return Err(Error::DimMismatch(format!(
            "curves have {} dimensions, basis has {}",
            curves.dims,
            b.dims()
        )));
    }
    let offsets = b.offsets();
    let rows: Vec<Vec<f64>> = curves
        .curves
        .par_iter()
        .map(|curve| {
            let mut row = vec![0.0; b.total()];
            for (dim, obs) in curve.iter().enumerate() {
                let coef = smooth_one(obs, b, dim)?;
                row[offsets[dim]..offsets[dim] + coef.len()].copy_from_slice(&coef);
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let n = rows.len();
    let values = DMatrix::from_fn(n, b.total(), |i, j| rows[i][j]);
    CoefficientMatrix::new(values, b.counts.clone())
}
