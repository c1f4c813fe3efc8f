//! Synthetic data: the two benchmark scenarios and sampling from any fitted
//! mixture.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::basis::{gram, BasisSystem, CurveSet, GramMatrix, Observations};
use crate::error::{Error, Result};
use crate::model::{ClusterParams, CovStructure, FlmVariant, MixtureModel};
use crate::numerics::{spd_sqrt, SymMatrix};
use crate::rng;

/// Generating parameters of one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub d: usize,
    pub a: Vec<f64>,
    pub b: f64,
    pub mu_x: Vec<f64>,
    pub gamma0: Vec<f64>,
    /// Rows of the slope matrix.
    pub gamma: Vec<Vec<f64>>,
    /// Response covariance is `sigma_y · I`.
    pub sigma_y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: u8,
    pub n: usize,
    pub pi: Vec<f64>,
    pub clusters: Vec<ClusterSpec>,
    pub x_domain: (f64, f64),
    pub y_domain: (f64, f64),
    pub x_grid_len: usize,
    pub y_grid_len: usize,
    pub nbasis: usize,
    pub order: usize,
}

const GAMMA0_1: [f64; 6] = [40.55785, -136.39392, 364.48536, -1009.44904, 137.08185, -53.19644];
const GAMMA0_2: [f64; 6] = [10.55038, -94.09524, 386.14923, -886.60180, 105.71551, 250.83997];

const GAMMA_1: [[f64; 6]; 6] = [
    [0.1604788, -0.006105744, -0.34002176, 0.8045786, -1.809933, 3.1085371],
    [0.0216076, 0.360282816, 0.02519028, 0.0829196, -1.394305, 2.9290406],
    [-1.5683676, 1.279807057, -2.81184706, 4.6599002, -6.812895, 7.9705907],
    [3.2542660, -0.769508698, 1.18667337, -2.3600145, 2.725763, -1.9297317],
    [-2.1495590, 2.106397045, -0.45220970, -0.5759578, 1.517537, -0.9133536],
    [1.8634967, -1.706644614, 1.91048360, -1.6978476, 1.125397, -0.1015894],
];

const GAMMA_2: [[f64; 6]; 6] = [
    [-0.3061923, 0.59565429, -0.8955555, 1.1888545, -1.8901795, 3.07764911],
    [-0.2590663, 1.36715364, -2.1170851, 2.4453460, -3.2342896, 4.11607039],
    [-1.2827794, 0.52439869, -0.9992164, 2.1114220, -4.0969844, 5.91743174],
    [4.5782789, -0.04588379, -1.9809570, 0.6746645, -0.2431451, 1.01274374],
    [0.8890119, 0.15656989, -0.6024806, 0.4886304, -0.6317594, 1.18570678],
    [2.8875206, -1.88979145, 0.9503891, -0.8400636, 0.6522031, -0.02998784],
];

const MU_1: [[f64; 6]; 2] = [
    [1459.420, 1297.329, 883.6936, 1052.785, 1167.558, 1183.825],
    [1555.634, 1450.803, 867.3406, 1429.287, 1528.500, 1517.618],
];

const MU_2: [[f64; 6]; 2] = [
    [1042.4431, 926.6636, 631.2097, 751.9895, 833.9701, 845.5891],
    [1111.167, 1036.288, 619.529, 1020.919, 1091.786, 1084.013],
];

impl ScenarioSpec {
    /// Scenario 1 (well separated predictor means) or 2 (overlapping means).
    pub fn scenario(which: u8, n: usize) -> Result<Self> {
        let mu = match which {
            1 => MU_1,
            2 => MU_2,
            _ => return Err(Error::InvalidConfig(format!("unknown scenario {which}; expected 1 or 2"))),
        };
        let rows = |g: &[[f64; 6]; 6]| g.iter().map(|r| r.to_vec()).collect::<Vec<_>>();
        Ok(ScenarioSpec {
            scenario: which,
            n,
            pi: vec![0.5, 0.5],
            clusters: vec![
                ClusterSpec {
                    d: 2,
                    a: vec![6730.074, 1641.839],
                    b: 70.57964,
                    mu_x: mu[0].to_vec(),
                    gamma0: GAMMA0_1.to_vec(),
                    gamma: rows(&GAMMA_1),
                    sigma_y: 434.6492,
                },
                ClusterSpec {
                    d: 1,
                    a: vec![95464.836],
                    b: 2351.284,
                    mu_x: mu[1].to_vec(),
                    gamma0: GAMMA0_2.to_vec(),
                    gamma: rows(&GAMMA_2),
                    sigma_y: 1014.901,
                },
            ],
            x_domain: (0.0, 12.0),
            y_domain: (12.0, 24.0),
            x_grid_len: 36,
            y_grid_len: 60,
            nbasis: 6,
            order: 4,
        })
    }

    pub fn basis_x(&self) -> Result<BasisSystem> {
        BasisSystem::bspline(self.order, vec![self.nbasis], self.x_domain.0, self.x_domain.1)
    }

    pub fn basis_y(&self) -> Result<BasisSystem> {
        BasisSystem::bspline(self.order, vec![self.nbasis], self.y_domain.0, self.y_domain.1)
    }

    pub fn grid_x(&self) -> Vec<f64> {
        uniform_grid(self.x_domain, self.x_grid_len)
    }

    pub fn grid_y(&self) -> Vec<f64> {
        uniform_grid(self.y_domain, self.y_grid_len)
    }

    /// The generating mixture, with a random orientation `Q_k` per cluster
    /// drawn from `seed`.
    pub fn to_model(&self, seed: u64) -> Result<MixtureModel> {
        let gram_x = gram(&self.basis_x()?)?;
        let r = self.nbasis;
        let clusters = self
            .clusters
            .iter()
            .zip(&self.pi)
            .enumerate()
            .map(|(k, (c, &pi))| {
                let mut orient = rng::stream(seed, &[rng::tag::ORIENTATION, k as u64]);
                let mut gamma_star = DMatrix::zeros(r, r + 1);
                for (i, row) in c.gamma.iter().enumerate() {
                    for (j, &v) in row.iter().enumerate() {
                        gamma_star[(i, j)] = v;
                    }
                    gamma_star[(i, r)] = c.gamma0[i];
                }
                ClusterParams {
                    pi,
                    mu_x: DVector::from_column_slice(&c.mu_x),
                    d: c.d,
                    q: random_orthogonal(r, &mut orient),
                    a: c.a.clone(),
                    b: c.b,
                    gamma_star,
                    sigma_y: SymMatrix::scaled_identity(r, c.sigma_y),
                }
            })
            .collect();
        let model = MixtureModel {
            variant: FlmVariant::AkjBk,
            cov: CovStructure::VII,
            clusters,
            gram_x,
            basis_x: Some(self.basis_x()?),
            basis_y: Some(self.basis_y()?),
        };
        model.validate()?;
        Ok(model)
    }
}

fn uniform_grid((lo, hi): (f64, f64), len: usize) -> Vec<f64> {
    match len {
        0 => vec![],
        1 => vec![lo],
        _ => (0..len).map(|i| lo + (hi - lo) * i as f64 / (len - 1) as f64).collect(),
    }
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// diagonal of R made positive.
pub fn random_orthogonal<R: Rng>(r: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(r, r, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let rr = qr.r();
    for j in 0..r {
        if rr[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Sampled coefficients with 0-based cluster labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledData {
    pub c_x: DMatrix<f64>,
    pub c_y: DMatrix<f64>,
    pub labels: Vec<usize>,
}

struct ClusterSampler {
    mu: DVector<f64>,
    /// `W^{-1/2} Q D^{1/2}`.
    x_factor: DMatrix<f64>,
    y_factor: DMatrix<f64>,
    gamma_star: DMatrix<f64>,
}

/// Draws `n` labelled pairs from `model`.
pub fn sample_from_model(model: &MixtureModel, n: usize, seed: u64) -> Result<SampledData> {
    model.validate()?;
    sample_with(model, &model.gram_x, n, &mut rng::stream(seed, &[rng::tag::MODEL_SAMPLE]))
}

fn sample_with<R: Rng>(model: &MixtureModel, gram_x: &GramMatrix, n: usize, rng: &mut R) -> Result<SampledData> {
    let (rx, ry) = (model.r_x(), model.r_y());
    let samplers = model
        .clusters
        .iter()
        .map(|c| {
            let scale = DVector::from_fn(rx, |l, _| if l < c.d { c.a[l].sqrt() } else { c.b.sqrt() });
            Ok(ClusterSampler {
                mu: c.mu_x.clone(),
                x_factor: gram_x.inv_sqrt.matrix() * &c.q * DMatrix::from_diagonal(&scale),
                y_factor: spd_sqrt(&c.sigma_y)?.into_inner(),
                gamma_star: c.gamma_star.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let cumulative: Vec<f64> = model
        .clusters
        .iter()
        .scan(0.0, |acc, c| {
            *acc += c.pi;
            Some(*acc)
        })
        .collect();

    let mut c_x = DMatrix::zeros(n, rx);
    let mut c_y = DMatrix::zeros(n, ry);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let u: f64 = rng.random::<f64>() * cumulative[cumulative.len() - 1];
        let k = cumulative.iter().position(|&c| u < c).unwrap_or(cumulative.len() - 1);
        let s = &samplers[k];
        let z = DVector::from_fn(rx, |_, _| rng.sample::<f64, _>(StandardNormal));
        let e = DVector::from_fn(ry, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = &s.mu + &s.x_factor * z;
        let y = &s.gamma_star * crate::model::augmented_predictor(gram_x, &x) + &s.y_factor * e;
        c_x.row_mut(i).copy_from(&x.transpose());
        c_y.row_mut(i).copy_from(&y.transpose());
        labels.push(k);
    }
    Ok(SampledData { c_x, c_y, labels })
}

/// Draws a scenario dataset. Orientations and samples both derive from `seed`.
pub fn sample_coefficients(spec: &ScenarioSpec, seed: u64) -> Result<SampledData> {
    let model = spec.to_model(seed)?;
    sample_with(&model, &model.gram_x, spec.n, &mut rng::stream(seed, &[rng::tag::SIMULATE]))
}

/// Evaluates every coefficient row on `grid` (same grid for every dimension).
pub fn coefficients_to_curves(c: &DMatrix<f64>, basis: &BasisSystem, grid: &[f64], ids: &[String]) -> Result<CurveSet> {
    if c.ncols() != basis.total() {
        return Err(Error::DimMismatch(format!("{} coefficients per row, basis has {}", c.ncols(), basis.total())));
    }
    if ids.len() != c.nrows() {
        return Err(Error::LengthMismatch(ids.len(), c.nrows()));
    }
    let offsets = basis.offsets();
    let evals: Vec<Vec<Vec<f64>>> = (0..basis.dims())
        .map(|j| grid.iter().map(|&t| basis.eval(j, t)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let curves = (0..c.nrows())
        .map(|i| {
            (0..basis.dims())
                .map(|j| Observations {
                    t: grid.to_vec(),
                    values: evals[j]
                        .iter()
                        .map(|phi| phi.iter().enumerate().map(|(r, v)| v * c[(i, offsets[j] + r)]).sum())
                        .collect(),
                })
                .collect()
        })
        .collect();
    CurveSet::new(ids.to_vec(), curves)
}

/// Default curve identifiers `1..=n`.
pub fn default_ids(n: usize) -> Vec<String> {
    (1..=n).map(|i| i.to_string()).collect()
}
