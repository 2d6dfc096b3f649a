//! Step-one pseudo-targets: balanced and confident label targets and the
//! pairwise relation matrix.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::kmeans::kmeans;
use crate::model::Model;

/// Frequency substituted for a cluster no sample is assigned to.
pub const EMPTY_CLUSTER_FREQUENCY: f64 = 1e-8;

/// Same-cluster indicators induced by a partition of the macro-batch.
///
/// Stored as the partition itself, so symmetry, a unit diagonal and
/// transitivity hold by construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationMatrix {
    assignments: Vec<usize>,
}

impl RelationMatrix {
    pub fn from_assignments(assignments: Vec<usize>) -> Self {
        Self { assignments }
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn related(&self, i: usize, j: usize) -> bool {
        i == j || self.assignments[i] == self.assignments[j]
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn to_dense(&self) -> Array2<u8> {
        let m = self.len();
        Array2::from_shape_fn((m, m), |(i, j)| self.related(i, j) as u8)
    }

    /// Restriction to the given positions, in order.
    pub fn select(&self, positions: &[usize]) -> Self {
        Self { assignments: positions.iter().map(|&p| self.assignments[p]).collect() }
    }
}

/// Column sums of the macro-batch label features.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentFrequency {
    pub z: Array1<f64>,
}

impl AssignmentFrequency {
    pub fn of(l: ArrayView2<'_, f64>) -> Self {
        Self { z: l.sum_axis(Axis(0)) }
    }

    fn divisors(&self) -> Array1<f64> {
        self.z.mapv(|z| if z > 0.0 { z } else { EMPTY_CLUSTER_FREQUENCY })
    }
}

#[derive(Serialize, Deserialize)]
struct DumpHeader {
    rows: usize,
    k: usize,
    sample_indices: Vec<usize>,
    assignments: Vec<usize>,
}

/// Targets for one macro-batch, aligned with `sample_indices`.
#[derive(Clone, Debug)]
pub struct PseudoTargetSet {
    pub balanced: Array2<f64>,
    pub relations: RelationMatrix,
    pub attention: Array2<f64>,
    pub sample_indices: Vec<usize>,
}

impl PseudoTargetSet {
    pub fn len(&self) -> usize {
        self.sample_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_indices.is_empty()
    }

    /// Targets of the samples at the given macro-batch positions.
    pub fn select(&self, positions: &[usize]) -> Self {
        Self {
            balanced: self.balanced.select(Axis(0), positions),
            relations: self.relations.select(positions),
            attention: self.attention.select(Axis(0), positions),
            sample_indices: positions.iter().map(|&p| self.sample_indices[p]).collect(),
        }
    }

    /// Writes a debug dump: a JSON header line with the sample indices and
    /// cluster assignments, then both target matrices as little-endian `f64`.
    pub fn write_dump(&self, path: &Path) -> Result<()> {
        let header = DumpHeader {
            rows: self.len(),
            k: self.balanced.ncols(),
            sample_indices: self.sample_indices.clone(),
            assignments: self.relations.assignments().to_vec(),
        };
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for v in self.balanced.iter().chain(self.attention.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_dump(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let split = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Shape("dump has no header".into()))?;
        let header: DumpHeader = serde_json::from_slice(&bytes[..split])?;
        let n = header.rows * header.k;
        let mut body = &bytes[split + 1..];
        if body.len() != 16 * n || header.sample_indices.len() != header.rows || header.assignments.len() != header.rows {
            return Err(Error::Shape("dump body does not match its header".into()));
        }
        let mut read = |count: usize| -> Result<Array2<f64>> {
            let mut vals = Vec::with_capacity(count);
            let mut buf = [0u8; 8];
            for _ in 0..count {
                body.read_exact(&mut buf)?;
                vals.push(f64::from_le_bytes(buf));
            }
            Ok(Array2::from_shape_vec((header.rows, header.k), vals).expect("checked length"))
        };
        let balanced = read(n)?;
        let attention = read(n)?;
        Ok(Self {
            balanced,
            relations: RelationMatrix::from_assignments(header.assignments),
            attention,
            sample_indices: header.sample_indices,
        })
    }

    /// Derives all three targets from macro-batch label features.
    pub fn from_features(l: ArrayView2<'_, f64>, k: usize, seed: u64, sample_indices: Vec<usize>) -> Result<Self> {
        if sample_indices.len() != l.nrows() {
            return Err(Error::Shape("one sample index per feature row required".into()));
        }
        Ok(Self {
            balanced: balanced_target(l)?,
            relations: relations_by_kmeans(l, k, seed)?,
            attention: confident_attention_target(l)?,
            sample_indices,
        })
    }
}

fn check_features(l: ArrayView2<'_, f64>) -> Result<()> {
    if l.nrows() == 0 || l.ncols() == 0 {
        return Err(Error::EmptyInput);
    }
    if l.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Shape("label features must be finite and nonnegative".into()));
    }
    Ok(())
}

fn reweight(values: Array2<f64>, z: &Array1<f64>) -> Array2<f64> {
    let mut out = values / z;
    for mut row in out.rows_mut() {
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        }
    }
    out
}

/// Divides each assignment score by its cluster's frequency and renormalises.
pub fn balanced_target(l: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    check_features(l)?;
    let z = AssignmentFrequency::of(l).divisors();
    Ok(reweight(l.to_owned(), &z))
}

/// Squares the scores, divides by cluster frequency and renormalises.
pub fn confident_attention_target(l: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    check_features(l)?;
    let z = AssignmentFrequency::of(l).divisors();
    Ok(reweight(l.mapv(|v| v * v), &z))
}

/// Partitions the feature rows with k-means and returns the relation matrix.
pub fn relations_by_kmeans(l: ArrayView2<'_, f64>, k: usize, seed: u64) -> Result<RelationMatrix> {
    Ok(RelationMatrix::from_assignments(kmeans(l, k, seed)?.assignments))
}

/// Label features of `indices`, computed in evaluation mode `m1` samples at a time.
///
/// At most `m1` decoded images are alive at any moment.
pub fn batched_label_features(model: &Model, data: &Dataset, indices: &[usize], m1: usize) -> Result<Array2<f64>> {
    if m1 == 0 {
        return Err(Error::InvalidConfig("sub-batch size m1 must be >= 1".into()));
    }
    if indices.is_empty() {
        return Err(Error::EmptyInput);
    }
    let k = model.config().cluster_count;
    let mut out = Array2::zeros((indices.len(), k));
    for (chunk_no, chunk) in indices.chunks(m1).enumerate() {
        let features = {
            let batch = data.batch(chunk)?;
            model.label_features_eval(batch.samples())?
        };
        let start = chunk_no * m1;
        out.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(&features.mapv(|v| v as f64));
    }
    Ok(out)
}

/// Re-estimates the model's batch-norm statistics over `indices`, decoding
/// at most `m1` images at a time.
pub fn recalibrate_batch_norm(model: &mut Model, data: &Dataset, indices: &[usize], m1: usize) -> Result<()> {
    if m1 == 0 {
        return Err(Error::InvalidConfig("sub-batch size m1 must be >= 1".into()));
    }
    if indices.is_empty() {
        return Err(Error::EmptyInput);
    }
    model.recalibrate_batch_norm(|f| {
        for chunk in indices.chunks(m1) {
            let batch = data.batch(chunk)?;
            f(batch.samples())?;
        }
        Ok(())
    })
}

/// Step one of the two-step algorithm for a single macro-batch.
pub fn compute_pseudo_targets(
    model: &Model,
    data: &Dataset,
    indices: &[usize],
    m1: usize,
    k: usize,
    seed: u64,
) -> Result<PseudoTargetSet> {
    let l = batched_label_features(model, data, indices, m1)?;
    PseudoTargetSet::from_features(l.view(), k, seed, indices.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn dump_round_trips() {
        let l = array![[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]];
        let set = PseudoTargetSet::from_features(l.view(), 2, 0, vec![4, 2, 9]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        set.write_dump(&path).unwrap();
        let back = PseudoTargetSet::read_dump(&path).unwrap();
        assert_eq!(back.balanced, set.balanced);
        assert_eq!(back.attention, set.attention);
        assert_eq!(back.relations, set.relations);
        assert_eq!(back.sample_indices, set.sample_indices);
    }

    #[test]
    fn balanced_hand_case() {
        let l = array![[0.6, 0.4], [0.6, 0.4]];
        let t = balanced_target(l.view()).unwrap();
        assert!((t[[0, 0]] - 0.5).abs() < 1e-12 && (t[[0, 1]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn uniform_frequency_is_identity() {
        let l = array![[0.7, 0.3], [0.3, 0.7]];
        assert_eq!(balanced_target(l.view()).unwrap(), l);
    }

    #[test]
    fn confident_hand_case() {
        let l = array![[0.8, 0.2], [0.2, 0.8]];
        let t = confident_attention_target(l.view()).unwrap();
        assert!((t[[0, 0]] - 0.941_176_470_588).abs() < 1e-9);
        assert!((t[[0, 1]] - 0.058_823_529_412).abs() < 1e-9);
    }

    #[test]
    fn empty_cluster_uses_floor() {
        let l = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let t = balanced_target(l.view()).unwrap();
        assert_eq!(t, l);
        assert!(t.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn one_hot_groups_give_block_relations() {
        let l = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]];
        let r = relations_by_kmeans(l.view(), 2, 3).unwrap();
        let expected = array![[1, 0, 1, 0], [0, 1, 0, 1], [1, 0, 1, 0], [0, 1, 0, 1]];
        assert_eq!(r.to_dense(), expected);
        assert!(relations_by_kmeans(l.view(), 5, 3).is_err());
    }

    #[test]
    fn identical_rows_are_all_related() {
        let l = array![[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]];
        let r = relations_by_kmeans(l.view(), 2, 0).unwrap();
        assert!(r.to_dense().iter().all(|&v| v == 1));
    }

    #[test]
    fn select_keeps_alignment() {
        let l = array![[1.0, 0.0], [0.0, 1.0], [0.9, 0.1]];
        let set = PseudoTargetSet::from_features(l.view(), 2, 1, vec![10, 11, 12]).unwrap();
        let sub = set.select(&[2, 0]);
        assert_eq!(sub.sample_indices, vec![12, 10]);
        assert_eq!(sub.balanced.row(1), set.balanced.row(0));
        assert!(sub.relations.related(0, 1));
    }
}
