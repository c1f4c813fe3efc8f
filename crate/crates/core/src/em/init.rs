//! Starting partitions: k-means++ seeded Lloyd iterations on the concatenated
//! coefficients, or a uniform multinomial draw.

use nalgebra::DMatrix;
use rand::Rng;

use super::Responsibilities;
use crate::error::{Error, Result};
use crate::model::InitMethod;
use crate::rng;

const MAX_ATTEMPTS: usize = 50;
const LLOYD_ITERS: usize = 100;

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn kmeans_pp<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].clone();
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(squared_distance(p, &c));
        }
        centers.push(c);
    }
    centers
}

fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>) -> Vec<usize> {
    let k = centers.len();
    let dim = points[0].len();
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
    for _ in 0..LLOYD_ITERS {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    labels
}

fn all_clusters_used(labels: &[usize], k: usize) -> bool {
    let mut seen = vec![false; k];
    for &l in labels {
        seen[l] = true;
    }
    seen.into_iter().all(|s| s)
}

/// Hard starting partition drawn from `rng`.
pub fn init_responsibilities_with<R: Rng>(
    method: InitMethod,
    c_x: &DMatrix<f64>,
    c_y: &DMatrix<f64>,
    k: usize,
    rng: &mut R,
) -> Result<Responsibilities> {
    let n = c_x.nrows();
    if c_y.nrows() != n {
        return Err(Error::LengthMismatch(n, c_y.nrows()));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidConfig(format!("cannot form {k} clusters from {n} observations")));
    }
    let points: Vec<Vec<f64>> = (0..n)
        .map(|i| c_x.row(i).iter().chain(c_y.row(i).iter()).copied().collect())
        .collect();
    for _ in 0..MAX_ATTEMPTS {
        let labels = match method {
            InitMethod::Kmeans => lloyd(&points, kmeans_pp(&points, k, rng)),
            InitMethod::Random => (0..n).map(|_| rng.random_range(0..k)).collect(),
        };
        if all_clusters_used(&labels, k) {
            return Responsibilities::from_labels(&labels, k);
        }
    }
    Err(Error::InitFailure(k))
}

/// Hard starting partition from a seed.
pub fn init_responsibilities(
    method: InitMethod,
    c_x: &DMatrix<f64>,
    c_y: &DMatrix<f64>,
    k: usize,
    seed: u64,
) -> Result<Responsibilities> {
    init_responsibilities_with(method, c_x, c_y, k, &mut rng::stream(seed, &[rng::tag::INIT]))
}
