//! Mixture parameter containers, model codes, free-parameter counts, and
//! reconstruction of the functional regression surfaces.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::basis::{BasisSystem, GramMatrix};
use crate::error::{Error, Result};
use crate::numerics::SymMatrix;

/// How the leading subspace variances `a` are shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AShare {
    /// One value per cluster and per retained direction.
    PerDirection,
    /// One value per cluster.
    PerCluster,
    /// A single value for the whole mixture.
    Common,
}

/// The six subspace sub-models for the predictor coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FlmVariant {
    AkjBk,
    AkjB,
    AkBk,
    AkB,
    ABk,
    AB,
}

impl FlmVariant {
    pub const ALL: [FlmVariant; 6] = [
        FlmVariant::AkjBk,
        FlmVariant::AkjB,
        FlmVariant::AkBk,
        FlmVariant::AkB,
        FlmVariant::ABk,
        FlmVariant::AB,
    ];

    /// Short form used inside model codes, e.g. `akj,bk`.
    pub fn short(self) -> &'static str {
        match self {
            FlmVariant::AkjBk => "akj,bk",
            FlmVariant::AkjB => "akj,b",
            FlmVariant::AkBk => "ak,bk",
            FlmVariant::AkB => "ak,b",
            FlmVariant::ABk => "a,bk",
            FlmVariant::AB => "a,b",
        }
    }

    pub fn a_share(self) -> AShare {
        match self {
            FlmVariant::AkjBk | FlmVariant::AkjB => AShare::PerDirection,
            FlmVariant::AkBk | FlmVariant::AkB => AShare::PerCluster,
            FlmVariant::ABk | FlmVariant::AB => AShare::Common,
        }
    }

    /// True when one `b` is shared by all clusters.
    pub fn common_b(self) -> bool {
        matches!(self, FlmVariant::AkjB | FlmVariant::AkB | FlmVariant::AB)
    }
}

impl fmt::Display for FlmVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FLM[{}]", self.short())
    }
}

impl FromStr for FlmVariant {
    type Err = Error;

    /// Accepts `FLM[akj,bk]`, `akj,bk` or `AkjBk`, case-insensitively.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let inner = lower
            .strip_prefix("flm[")
            .and_then(|r| r.strip_suffix(']'))
            .unwrap_or(&lower);
        let compact: String = inner.chars().filter(|c| !matches!(c, ',' | ' ' | '_')).collect();
        FlmVariant::ALL
            .into_iter()
            .find(|v| v.short().replace(',', "") == compact)
            .ok_or_else(|| Error::UnknownModel(s.to_string()))
    }
}

/// The fourteen parsimonious response covariance structures. Only those with
/// closed-form updates can be fitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CovStructure {
    EII,
    VII,
    EEI,
    VEI,
    EVI,
    VVI,
    EEE,
    VEE,
    EVE,
    EEV,
    VVE,
    VEV,
    EVV,
    VVV,
}

impl CovStructure {
    pub const ALL: [CovStructure; 14] = [
        CovStructure::EII,
        CovStructure::VII,
        CovStructure::EEI,
        CovStructure::VEI,
        CovStructure::EVI,
        CovStructure::VVI,
        CovStructure::EEE,
        CovStructure::VEE,
        CovStructure::EVE,
        CovStructure::EEV,
        CovStructure::VVE,
        CovStructure::VEV,
        CovStructure::EVV,
        CovStructure::VVV,
    ];

    pub const IMPLEMENTED: [CovStructure; 6] = [
        CovStructure::EII,
        CovStructure::VII,
        CovStructure::EEI,
        CovStructure::VVI,
        CovStructure::EEE,
        CovStructure::VVV,
    ];

    pub fn is_implemented(self) -> bool {
        Self::IMPLEMENTED.contains(&self)
    }

    pub fn code(self) -> &'static str {
        match self {
            CovStructure::EII => "EII",
            CovStructure::VII => "VII",
            CovStructure::EEI => "EEI",
            CovStructure::VEI => "VEI",
            CovStructure::EVI => "EVI",
            CovStructure::VVI => "VVI",
            CovStructure::EEE => "EEE",
            CovStructure::VEE => "VEE",
            CovStructure::EVE => "EVE",
            CovStructure::EEV => "EEV",
            CovStructure::VVE => "VVE",
            CovStructure::VEV => "VEV",
            CovStructure::EVV => "EVV",
            CovStructure::VVV => "VVV",
        }
    }

    /// Free parameters of the response covariances for `k` clusters of
    /// dimension `r`.
    pub fn param_count(self, k: usize, r: usize) -> usize {
        let (k, r) = (k as i64, r as i64);
        let full = r * (r + 1) / 2;
        let n = match self {
            CovStructure::EII => 1,
            CovStructure::VII => k,
            CovStructure::EEI => r,
            CovStructure::VEI => k + r - 1,
            CovStructure::EVI => k * r - (k - 1),
            CovStructure::VVI => k * r,
            CovStructure::EEE => full,
            CovStructure::VEE => full + k - 1,
            CovStructure::EVE => full + (k - 1) * (r - 1),
            CovStructure::EEV => k * full - (k - 1) * r,
            CovStructure::VVE => full + (k - 1) * r,
            CovStructure::VEV => k * full - (k - 1) * (r - 1),
            CovStructure::EVV => k * full - (k - 1),
            CovStructure::VVV => k * full,
        };
        n as usize
    }
}

impl fmt::Display for CovStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for CovStructure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let upper = s.trim().to_ascii_uppercase();
        CovStructure::ALL
            .into_iter()
            .find(|c| c.code() == upper)
            .ok_or_else(|| Error::UnknownModel(s.to_string()))
    }
}

macro_rules! serde_via_str {
    ($t:ty) => {
        impl Serialize for $t {
            fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

serde_via_str!(FlmVariant);
serde_via_str!(CovStructure);

/// Full model identity, displayed as e.g. `FLM[akj,bk]-VVV`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelCode {
    pub variant: FlmVariant,
    pub cov: CovStructure,
}

impl fmt::Display for ModelCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.variant, self.cov)
    }
}

impl FromStr for ModelCode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (v, c) = s.trim().rsplit_once('-').ok_or_else(|| Error::UnknownModel(s.to_string()))?;
        Ok(ModelCode { variant: v.parse()?, cov: c.parse()? })
    }
}

/// Per-cluster parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub pi: f64,
    #[serde(with = "crate::matrix_serde::vector")]
    pub mu_x: DVector<f64>,
    pub d: usize,
    /// Orthonormal columns; the first `d` span the cluster subspace in the
    /// W-metric.
    #[serde(with = "crate::matrix_serde")]
    pub q: DMatrix<f64>,
    pub a: Vec<f64>,
    pub b: f64,
    /// `R_Y × (R_X + 1)`: slope block followed by the intercept column.
    #[serde(with = "crate::matrix_serde")]
    pub gamma_star: DMatrix<f64>,
    pub sigma_y: SymMatrix,
}

impl ClusterParams {
    pub fn r_x(&self) -> usize {
        self.mu_x.len()
    }

    pub fn r_y(&self) -> usize {
        self.gamma_star.nrows()
    }

    pub fn intercept(&self) -> DVector<f64> {
        self.gamma_star.column(self.r_x()).into_owned()
    }

    pub fn slope(&self) -> DMatrix<f64> {
        self.gamma_star.columns(0, self.r_x()).into_owned()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let (rx, ry) = (self.r_x(), self.r_y());
        if self.q.shape() != (rx, rx) {
            return Err(Error::DimMismatch(format!("Q is {:?}, expected {rx}x{rx}", self.q.shape())));
        }
        if self.gamma_star.ncols() != rx + 1 {
            return Err(Error::DimMismatch(format!(
                "Gamma* has {} columns, expected {}",
                self.gamma_star.ncols(),
                rx + 1
            )));
        }
        if self.sigma_y.dim() != ry {
            return Err(Error::DimMismatch(format!(
                "Sigma_Y is {0}x{0}, expected {ry}x{ry}",
                self.sigma_y.dim()
            )));
        }
        if self.a.len() != self.d || self.d == 0 || self.d >= rx {
            return Err(Error::DimMismatch(format!(
                "d = {} with {} leading variances and R_X = {rx}",
                self.d,
                self.a.len()
            )));
        }
        Ok(())
    }
}

/// A fitted (or generating) mixture.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "MixtureRepr", into = "MixtureRepr")]
pub struct MixtureModel {
    pub variant: FlmVariant,
    pub cov: CovStructure,
    pub clusters: Vec<ClusterParams>,
    pub gram_x: GramMatrix,
    pub basis_x: Option<BasisSystem>,
    pub basis_y: Option<BasisSystem>,
}

#[derive(Serialize, Deserialize)]
struct MixtureRepr {
    code: String,
    k: usize,
    r_x: usize,
    r_y: usize,
    clusters: Vec<ClusterParams>,
    gram_x: GramMatrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    basis_x: Option<BasisSystem>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    basis_y: Option<BasisSystem>,
}

impl From<MixtureModel> for MixtureRepr {
    fn from(m: MixtureModel) -> Self {
        MixtureRepr {
            code: m.code().to_string(),
            k: m.k(),
            r_x: m.r_x(),
            r_y: m.r_y(),
            clusters: m.clusters,
            gram_x: m.gram_x,
            basis_x: m.basis_x,
            basis_y: m.basis_y,
        }
    }
}

impl TryFrom<MixtureRepr> for MixtureModel {
    type Error = Error;

    fn try_from(r: MixtureRepr) -> Result<Self> {
        let code: ModelCode = r.code.parse()?;
        let m = MixtureModel {
            variant: code.variant,
            cov: code.cov,
            clusters: r.clusters,
            gram_x: r.gram_x,
            basis_x: r.basis_x,
            basis_y: r.basis_y,
        };
        if m.k() != r.k || m.r_x() != r.r_x || m.r_y() != r.r_y {
            return Err(Error::DimMismatch("model header disagrees with its clusters".into()));
        }
        m.validate()?;
        Ok(m)
    }
}

impl MixtureModel {
    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    pub fn r_x(&self) -> usize {
        self.clusters.first().map_or(self.gram_x.dim(), |c| c.r_x())
    }

    pub fn r_y(&self) -> usize {
        self.clusters.first().map_or(0, |c| c.r_y())
    }

    pub fn code(&self) -> ModelCode {
        ModelCode { variant: self.variant, cov: self.cov }
    }

    pub fn dims(&self) -> Vec<usize> {
        self.clusters.iter().map(|c| c.d).collect()
    }

    pub fn free_params(&self) -> Result<usize> {
        free_param_count(self.k(), self.r_x(), self.r_y(), &self.dims(), self.variant, self.cov)
    }

    /// Structural checks: shapes agree, weights sum to one, variances positive.
    pub fn validate(&self) -> Result<()> {
        if self.clusters.is_empty() {
            return Err(Error::InvalidConfig("mixture has no clusters".into()));
        }
        let (rx, ry) = (self.r_x(), self.r_y());
        if self.gram_x.dim() != rx {
            return Err(Error::DimMismatch(format!("W is {0}x{0} but R_X = {rx}", self.gram_x.dim())));
        }
        for c in &self.clusters {
            c.check_shapes()?;
            if c.r_x() != rx || c.r_y() != ry {
                return Err(Error::DimMismatch("clusters disagree on R_X or R_Y".into()));
            }
            if !(c.pi > 0.0 && c.pi <= 1.0) {
                return Err(Error::Degenerate(format!("mixing weight {}", c.pi)));
            }
        }
        let total: f64 = self.clusters.iter().map(|c| c.pi).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Degenerate(format!("mixing weights sum to {total}")));
        }
        Ok(())
    }
}

/// Initialization strategy for the EM responsibilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMethod {
    Kmeans,
    Random,
}

impl FromStr for InitMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "kmeans" => Ok(InitMethod::Kmeans),
            "random" => Ok(InitMethod::Random),
            _ => Err(Error::InvalidConfig(format!("unknown init method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub k_range: Vec<usize>,
    pub variants: Vec<FlmVariant>,
    pub covs: Vec<CovStructure>,
    /// Scree-test threshold.
    pub epsilon: f64,
    pub init: InitMethod,
    pub n_rep: usize,
    pub max_iter: usize,
    /// Aitken stopping tolerance.
    pub tol: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            k_range: vec![2],
            variants: FlmVariant::ALL.to_vec(),
            covs: CovStructure::IMPLEMENTED.to_vec(),
            epsilon: 0.01,
            init: InitMethod::Kmeans,
            n_rep: 20,
            max_iter: 200,
            tol: 1e-6,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.k_range.is_empty() || self.k_range.contains(&0) {
            return bad("K range must be non-empty with K >= 1".into());
        }
        if self.variants.is_empty() || self.covs.is_empty() {
            return bad("at least one variant and one covariance structure are required".into());
        }
        if let Some(c) = self.covs.iter().find(|c| !c.is_implemented()) {
            return Err(Error::Unimplemented(c.code().into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("scree threshold must lie in (0, 1), got {}", self.epsilon));
        }
        if self.n_rep == 0 {
            return bad("n_rep must be at least 1".into());
        }
        if self.max_iter == 0 {
            return bad("max_iter must be at least 1".into());
        }
        if !(self.tol > 0.0) {
            return bad(format!("tolerance must be positive, got {}", self.tol));
        }
        Ok(())
    }
}

/// Number of free parameters: subspace model for X plus response covariance.
pub fn free_param_count(
    k: usize,
    r_x: usize,
    r_y: usize,
    d: &[usize],
    variant: FlmVariant,
    cov: CovStructure,
) -> Result<usize> {
    if d.len() != k {
        return Err(Error::LengthMismatch(d.len(), k));
    }
    if let Some(&bad) = d.iter().find(|&&dk| dk == 0 || dk >= r_x) {
        return Err(Error::InvalidConfig(format!("intrinsic dimension {bad} outside [1, {}]", r_x - 1)));
    }
    let tau1 = k * r_x + k - 1;
    let tau2: usize = d.iter().map(|&dk| dk * r_x - dk * (dk + 1) / 2).sum();
    let sum_d: usize = d.iter().sum();
    let flm = tau1
        + tau2
        + match variant {
            FlmVariant::AkjBk => 2 * k + sum_d,
            FlmVariant::AkjB => k + 1 + sum_d,
            FlmVariant::AkBk => 3 * k,
            FlmVariant::AkB | FlmVariant::ABk => 2 * k + 1,
            FlmVariant::AB => k + 2,
        };
    Ok(flm + cov.param_count(k, r_y))
}

/// Intercept and slope surfaces at `(s, t)`: `β₀(t) = ξ_Y(t) Γ₀` and
/// `β(t, s) = ξ_Y(t) Γ ξ_X(s)ᵀ`.
pub fn reconstruct_beta(
    params: &ClusterParams,
    basis_x: &BasisSystem,
    basis_y: &BasisSystem,
    s: f64,
    t: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if basis_x.total() != params.r_x() || basis_y.total() != params.r_y() {
        return Err(Error::DimMismatch("bases do not match the regression matrix".into()));
    }
    let xi_y = basis_y.eval_block(t)?;
    let xi_x = basis_x.eval_block(s)?;
    let beta0 = &xi_y * params.intercept();
    let beta = &xi_y * params.slope() * xi_x.transpose();
    Ok((beta0, beta))
}

/// `c* = (W c_x ; 1)`.
pub fn augmented_predictor(gram: &GramMatrix, c_x: &DVector<f64>) -> DVector<f64> {
    let wc = gram.w.matrix() * c_x;
    let mut out = DVector::zeros(wc.len() + 1);
    out.rows_mut(0, wc.len()).copy_from(&wc);
    out[wc.len()] = 1.0;
    out
}

/// Conditional mean of the response coefficients, `Γ* c*`.
pub fn predict_mean(params: &ClusterParams, gram: &GramMatrix, c_x: &DVector<f64>) -> Result<DVector<f64>> {
    if c_x.len() != gram.dim() || c_x.len() != params.r_x() {
        return Err(Error::DimMismatch(format!(
            "c_x has length {}, model expects {}",
            c_x.len(),
            params.r_x()
        )));
    }
    Ok(&params.gamma_star * augmented_predictor(gram, c_x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::basis::gram;

    fn params(rx: usize, ry: usize, gamma_star: DMatrix<f64>) -> ClusterParams {
        ClusterParams {
            pi: 1.0,
            mu_x: DVector::zeros(rx),
            d: 1,
            q: DMatrix::identity(rx, rx),
            a: vec![2.0],
            b: 1.0,
            gamma_star,
            sigma_y: SymMatrix::identity(ry),
        }
    }

    #[test]
    fn codes_round_trip() {
        for v in FlmVariant::ALL {
            for c in CovStructure::ALL {
                let code = ModelCode { variant: v, cov: c };
                assert_eq!(code.to_string().parse::<ModelCode>().unwrap(), code);
            }
        }
        assert_eq!("FLM[akj,bk]-VVV".parse::<ModelCode>().unwrap().to_string(), "FLM[akj,bk]-VVV");
        assert_eq!("AkjBk".parse::<FlmVariant>().unwrap(), FlmVariant::AkjBk);
        assert_eq!("a,b".parse::<FlmVariant>().unwrap(), FlmVariant::AB);
        assert!("FLM[x,y]".parse::<FlmVariant>().is_err());
        assert!("XYZ".parse::<CovStructure>().is_err());
    }

    #[test]
    fn flm_ab_count() {
        // K = 2, R_X = 6, d = (1, 1): τ₁ = 13, τ₂ = 10
        let tau = free_param_count(2, 6, 3, &[1, 1], FlmVariant::AB, CovStructure::EII).unwrap();
        assert_eq!(tau, 13 + 10 + 2 + 2 + 1);
    }

    #[test]
    fn eii_contributes_one() {
        assert_eq!(CovStructure::EII.param_count(5, 9), 1);
    }

    #[test]
    fn worked_count_example() {
        let tau = free_param_count(2, 6, 6, &[2, 1], FlmVariant::AkjBk, CovStructure::VVV).unwrap();
        assert_eq!(tau, 76);
    }

    #[test]
    fn invalid_dims_rejected() {
        assert!(free_param_count(2, 6, 6, &[6, 1], FlmVariant::AB, CovStructure::VVV).is_err());
        assert!(free_param_count(2, 6, 6, &[1], FlmVariant::AB, CovStructure::VVV).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(FitConfig::default().validate().is_ok());
        let mut c = FitConfig { epsilon: 1.0, ..FitConfig::default() };
        assert!(c.validate().is_err());
        c.epsilon = 0.1;
        c.covs = vec![CovStructure::EVE];
        assert!(matches!(c.validate(), Err(Error::Unimplemented(_))));
        c.covs = vec![CovStructure::VVV];
        c.n_rep = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn beta_zero_and_single_term() {
        let bx = BasisSystem::bspline(4, vec![6], 0.0, 1.0).unwrap();
        let by = BasisSystem::bspline(4, vec![5], 1.0, 2.0).unwrap();
        let p = params(6, 5, DMatrix::zeros(5, 7));
        let (b0, b) = reconstruct_beta(&p, &bx, &by, 0.3, 1.7).unwrap();
        assert_eq!(b0[0], 0.0);
        assert_eq!(b[(0, 0)], 0.0);

        let mut g = DMatrix::zeros(5, 7);
        g[(0, 6)] = 1.0;
        let p = params(6, 5, g);
        for t in [1.0, 1.2, 1.9] {
            let (b0, _) = reconstruct_beta(&p, &bx, &by, 0.5, t).unwrap();
            assert_relative_eq!(b0[0], by.eval(0, t).unwrap()[0], epsilon = 1e-15);
        }
        assert!(matches!(
            reconstruct_beta(&p, &bx, &by, 0.5, 3.0),
            Err(Error::OutOfDomain { .. })
        ));
    }

    #[test]
    fn beta_matches_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let bx = BasisSystem::fourier(vec![5, 3], 0.0, 1.0, None).unwrap();
        let by = BasisSystem::bspline(4, vec![6, 5], 0.0, 2.0).unwrap();
        let g = DMatrix::from_fn(11, 9, |_, _| rng.random_range(-1.0..1.0));
        let p = params(8, 11, g.clone());
        let (s, t) = (0.37, 1.21);
        let (_, beta) = reconstruct_beta(&p, &bx, &by, s, t).unwrap();
        let (ox, oy) = (bx.offsets(), by.offsets());
        for l in 0..2 {
            for j in 0..2 {
                let ey = by.eval(l, t).unwrap();
                let ex = bx.eval(j, s).unwrap();
                let mut acc = 0.0;
                for (r, vy) in ey.iter().enumerate() {
                    for (q, vx) in ex.iter().enumerate() {
                        acc += vy * g[(oy[l] + r, ox[j] + q)] * vx;
                    }
                }
                assert_relative_eq!(beta[(l, j)], acc, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn predict_mean_cases() {
        let gram6 = GramMatrix::identity(3);
        let mut g = DMatrix::zeros(2, 4);
        g[(0, 3)] = 5.0;
        g[(1, 3)] = -1.0;
        let p = params(3, 2, g);
        let out = predict_mean(&p, &gram6, &DVector::from_vec(vec![9.0, 8.0, 7.0])).unwrap();
        assert_eq!(out.as_slice(), &[5.0, -1.0]);

        let mut g = DMatrix::zeros(3, 4);
        g.view_mut((0, 0), (3, 3)).fill_with_identity();
        let p = params(3, 3, g);
        let c = DVector::from_vec(vec![1.5, -2.0, 0.25]);
        assert_eq!(predict_mean(&p, &gram6, &c).unwrap(), c);
        assert!(predict_mean(&p, &gram6, &DVector::zeros(2)).is_err());
    }

    #[test]
    fn predict_mean_with_bspline_gram() {
        let b = BasisSystem::bspline(4, vec![6], 0.0, 12.0).unwrap();
        let w = gram(&b).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gs = DMatrix::from_fn(6, 7, |_, _| rng.random_range(-2.0..2.0));
        let c = DVector::from_fn(6, |i, _| 1000.0 + 50.0 * i as f64);
        let p = params(6, 6, gs.clone());
        let got = predict_mean(&p, &w, &c).unwrap();
        for i in 0..6 {
            let mut acc = gs[(i, 6)];
            for j in 0..6 {
                let wc: f64 = (0..6).map(|l| w.w[(j, l)] * c[l]).sum();
                acc += gs[(i, j)] * wc;
            }
            assert_relative_eq!(got[i], acc, max_relative = 1e-12);
        }
    }

    #[test]
    fn model_json_round_trip() {
        let b = BasisSystem::bspline(4, vec![6], 0.0, 1.0).unwrap();
        let m = MixtureModel {
            variant: FlmVariant::AkBk,
            cov: CovStructure::VII,
            clusters: vec![params(6, 2, DMatrix::from_element(2, 7, 0.1 + 1e-17))],
            gram_x: gram(&b).unwrap(),
            basis_x: Some(b),
            basis_y: None,
        };
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.contains("\"code\":\"FLM[ak,bk]-VII\""));
        let back: MixtureModel = serde_json::from_str(&s).unwrap();
        assert_eq!(back.clusters, m.clusters);
        assert_eq!(back.gram_x.w, m.gram_x.w);
        assert_eq!(serde_json::to_string(&back).unwrap(), s);
    }

    fn counts_for(d: &[usize], rx: usize, ry: usize, v: FlmVariant, c: CovStructure) -> usize {
        free_param_count(d.len(), rx, ry, d, v, c).unwrap()
    }

    proptest! {
        #[test]
        fn monotone_in_k(rx in 3usize..10, ry in 1usize..10, k in 1usize..6, vi in 0usize..6, ci in 0usize..14) {
            let (v, c) = (FlmVariant::ALL[vi], CovStructure::ALL[ci]);
            let d = vec![1; k];
            let d1 = vec![1; k + 1];
            prop_assert!(counts_for(&d1, rx, ry, v, c) >= counts_for(&d, rx, ry, v, c));
        }

        #[test]
        fn monotone_in_d(rx in 3usize..10, k in 1usize..5, which in 0usize..5, vi in 0usize..6) {
            let which = which % k;
            let mut d = vec![1; k];
            let base = counts_for(&d, rx, 4, FlmVariant::ALL[vi], CovStructure::VVV);
            // τ₂ grows with d only while d ≤ R_X − 1, which is every admissible d.
            d[which] = 2;
            prop_assert!(counts_for(&d, rx, 4, FlmVariant::ALL[vi], CovStructure::VVV) >= base);
        }

        #[test]
        fn monotone_across_implemented_structures(k in 1usize..4, ry in 1usize..10) {
            // EII ≤ VII ≤ VVI, EII ≤ EEI ≤ EEE ≤ VVV and EEI ≤ VVI ≤ VVV hold
            // whenever R_Y ≥ 1; the remaining pairs in table order are not
            // ordered in general.
            let p = |c: CovStructure| c.param_count(k, ry);
            prop_assert!(p(CovStructure::EII) <= p(CovStructure::VII));
            prop_assert!(p(CovStructure::VII) <= p(CovStructure::VVI));
            prop_assert!(p(CovStructure::EII) <= p(CovStructure::EEI));
            prop_assert!(p(CovStructure::EEI) <= p(CovStructure::VVI));
            prop_assert!(p(CovStructure::EEI) <= p(CovStructure::EEE));
            prop_assert!(p(CovStructure::VVI) <= p(CovStructure::VVV));
            prop_assert!(p(CovStructure::EEE) <= p(CovStructure::VVV));
        }

        #[test]
        fn beta_is_linear_in_gamma(seed in any::<u64>(), s in 0.0f64..1.0, t in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bx = BasisSystem::bspline(4, vec![6], 0.0, 1.0).unwrap();
            let by = BasisSystem::bspline(4, vec![6], 0.0, 1.0).unwrap();
            let g = DMatrix::from_fn(6, 7, |_, _| rng.random_range(-1.0..1.0));
            let (_, b1) = reconstruct_beta(&params(6, 6, g.clone()), &bx, &by, s, t).unwrap();
            let (_, b2) = reconstruct_beta(&params(6, 6, g * 2.0), &bx, &by, s, t).unwrap();
            prop_assert!((b2[(0, 0)] - 2.0 * b1[(0, 0)]).abs() < 1e-12);
        }

        #[test]
        fn predict_mean_is_affine(seed in any::<u64>(), lambda in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = BasisSystem::bspline(4, vec![5], 0.0, 3.0).unwrap();
            let w = gram(&b).unwrap();
            let p = params(5, 3, DMatrix::from_fn(3, 6, |_, _| rng.random_range(-1.0..1.0)));
            let u = DVector::from_fn(5, |_, _| rng.random_range(-5.0..5.0));
            let v = DVector::from_fn(5, |_, _| rng.random_range(-5.0..5.0));
            let mix = &u * lambda + &v * (1.0 - lambda);
            let lhs = predict_mean(&p, &w, &mix).unwrap();
            let rhs = predict_mean(&p, &w, &u).unwrap() * lambda + predict_mean(&p, &w, &v).unwrap() * (1.0 - lambda);
            prop_assert!((lhs - rhs).norm() < 1e-10);
        }
    }
}
