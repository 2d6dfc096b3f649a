//! External clustering metrics: accuracy under the best one-to-one label
//! mapping, normalised mutual information and the adjusted Rand index.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reference class labels. Only evaluation code reads them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruth(Vec<usize>);

impl GroundTruth {
    pub fn new(labels: Vec<usize>) -> Self {
        Self(labels)
    }

    pub fn labels(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Counts of samples per (predicted, true) label pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContingencyTable {
    /// Distinct predicted ids, one per row.
    pub row_labels: Vec<usize>,
    /// Distinct true ids, one per column.
    pub col_labels: Vec<usize>,
    pub counts: Array2<u64>,
}

impl ContingencyTable {
    pub fn new(pred: &[usize], truth: &[usize]) -> Result<Self> {
        if pred.is_empty() {
            return Err(Error::EmptyInput);
        }
        if pred.len() != truth.len() {
            return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), truth.len())));
        }
        let index = |ids: &[usize]| -> BTreeMap<usize, usize> {
            let mut m: BTreeMap<usize, usize> = ids.iter().map(|&v| (v, 0)).collect();
            for (pos, v) in m.values_mut().enumerate() {
                *v = pos;
            }
            m
        };
        let rows = index(pred);
        let cols = index(truth);
        let mut counts = Array2::zeros((rows.len(), cols.len()));
        for (p, t) in pred.iter().zip(truth) {
            counts[[rows[p], cols[t]]] += 1;
        }
        Ok(Self { row_labels: rows.into_keys().collect(), col_labels: cols.into_keys().collect(), counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.rows().into_iter().map(|r| r.sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        self.counts.columns().into_iter().map(|c| c.sum()).collect()
    }
}

/// Minimum-cost perfect matching of a square cost matrix; returns the column
/// assigned to each row.
pub fn hungarian(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "cost matrix must be square");
    // potentials formulation with 1-based sentinel column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

fn accuracy_from_table(table: &ContingencyTable) -> (f64, BTreeMap<usize, usize>) {
    let (r, c) = table.counts.dim();
    let n = r.max(c);
    let mut cost = Array2::zeros((n, n));
    for ((i, j), &count) in table.counts.indexed_iter() {
        cost[[i, j]] = -(count as f64);
    }
    let assignment = hungarian(&cost);
    let mut mapping = BTreeMap::new();
    let mut matched = 0;
    for (i, &j) in assignment.iter().enumerate().take(r) {
        if j < c {
            matched += table.counts[[i, j]];
            mapping.insert(table.row_labels[i], table.col_labels[j]);
        }
    }
    (matched as f64 / table.total() as f64, mapping)
}

/// Fraction of samples matched under the optimal predicted-to-true mapping.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<(f64, BTreeMap<usize, usize>)> {
    Ok(accuracy_from_table(&ContingencyTable::new(pred, truth)?))
}

/// NMI from a contingency table and whether either partition was degenerate.
pub fn nmi_from_table(table: &ContingencyTable) -> (f64, bool) {
    let n = table.total() as f64;
    let a = table.row_sums();
    let b = table.col_sums();
    let entropy = |sums: &[u64]| -> f64 {
        sums.iter().filter(|&&s| s > 0).map(|&s| s as f64 * (s as f64 / n).ln()).sum()
    };
    let (ha, hb) = (entropy(&a), entropy(&b));
    if ha == 0.0 || hb == 0.0 {
        return (0.0, true);
    }
    let mut mi = 0.0;
    for ((i, j), &nij) in table.counts.indexed_iter() {
        if nij > 0 {
            let nij = nij as f64;
            mi += nij * (n * nij / (a[i] as f64 * b[j] as f64)).ln();
        }
    }
    ((mi / (ha * hb).sqrt()).clamp(0.0, 1.0), false)
}

pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    Ok(nmi_from_table(&ContingencyTable::new(pred, truth)?).0)
}

fn pairs(n: u64) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

pub fn ari_from_table(table: &ContingencyTable) -> Result<f64> {
    let n = table.total();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n as usize });
    }
    let index: f64 = table.counts.iter().map(|&c| pairs(c)).sum();
    let a: f64 = table.row_sums().into_iter().map(pairs).sum();
    let b: f64 = table.col_sums().into_iter().map(pairs).sum();
    let expected = a * b / pairs(n);
    let max = 0.5 * (a + b);
    let denom = max - expected;
    if denom == 0.0 {
        // both partitions are all-singletons or both a single cluster
        return Ok(1.0);
    }
    Ok((index - expected) / denom)
}

pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64> {
    ari_from_table(&ContingencyTable::new(pred, truth)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringReport {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
    /// Set when NMI was undefined and reported as 0.
    pub nmi_degenerate: bool,
    pub mapping: BTreeMap<usize, usize>,
    pub table: ContingencyTable,
}

pub fn report(pred: &[usize], truth: &[usize]) -> Result<ClusteringReport> {
    let table = ContingencyTable::new(pred, truth)?;
    let (acc, mapping) = accuracy_from_table(&table);
    let (nmi, nmi_degenerate) = nmi_from_table(&table);
    let ari = ari_from_table(&table)?;
    Ok(ClusteringReport { acc, nmi, ari, nmi_degenerate, mapping, table })
}

/// Scores predictions against a dataset's ground truth.
pub fn evaluate(pred: &[usize], truth: &GroundTruth) -> Result<ClusteringReport> {
    report(pred, truth.labels())
}
