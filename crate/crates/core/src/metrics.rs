//! Adjusted Rand index between two partitions.

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

/// `counts[r][c]`: items with true class `r` and predicted class `c`. Rows and
/// columns are ordered by first appearance of each label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
}

fn index_labels<T: Hash + Eq>(labels: &[T]) -> (Vec<usize>, usize) {
    let mut map = HashMap::new();
    let idx = labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect();
    (idx, map.len())
}

impl ContingencyTable {
    pub fn from_labels<T: Hash + Eq, U: Hash + Eq>(truth: &[T], pred: &[U]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::LengthMismatch(truth.len(), pred.len()));
        }
        let (ti, tn) = index_labels(truth);
        let (pi, pn) = index_labels(pred);
        let mut counts = vec![vec![0u64; pn]; tn];
        for (r, c) in ti.into_iter().zip(pi) {
            counts[r][c] += 1;
        }
        Ok(ContingencyTable { counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

fn pairs(n: u64) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Hubert–Arabie adjusted Rand index.
///
/// When the expected and maximum indices coincide (both partitions put every
/// item in one cluster, or every item in its own cluster) the partitions are
/// identical and the index is 1.
pub fn ari<T: Hash + Eq, U: Hash + Eq>(truth: &[T], pred: &[U]) -> Result<f64> {
    let table = ContingencyTable::from_labels(truth, pred)?;
    let index: f64 = table.counts.iter().flatten().map(|&c| pairs(c)).sum();
    let rows: f64 = table.counts.iter().map(|r| pairs(r.iter().sum())).sum();
    let ncols = table.counts.first().map_or(0, |r| r.len());
    let cols: f64 = (0..ncols).map(|c| pairs(table.counts.iter().map(|r| r[c]).sum())).sum();
    let total = pairs(table.total());
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}
