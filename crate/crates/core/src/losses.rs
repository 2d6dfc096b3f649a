//! The four self-learning losses and their weighted sum.
//!
//! Every loss comes with an analytic gradient with respect to its
//! differentiable arguments; targets are treated as constants.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pseudo_targets::PseudoTargetSet;

/// Floor applied to every logarithm argument.
pub const LOG_EPS: f64 = 1e-7;

/// Weights of the total loss `L_R + a1 L_T + a2 L_A + a3 L_E`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Transformation invariance (`a1`).
    pub transformation: f64,
    /// Soft attention (`a2`).
    pub attention: f64,
    /// Entropy (`a3`).
    pub entropy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { transformation: 5.0, attention: 5.0, entropy: 3.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.transformation, self.attention, self.entropy];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }
}

/// Per-step loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_r: f64,
    pub l_t: f64,
    pub l_a: f64,
    pub l_e: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(l_r: f64, l_t: f64, l_a: f64, l_e: f64, w: &LossWeights) -> Self {
        let total = l_r + w.transformation * l_t + w.attention * l_a + w.entropy * l_e;
        Self { l_r, l_t, l_a, l_e, total }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_r, self.l_t, self.l_a, self.l_e, self.total].iter().all(|v| v.is_finite())
    }
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("label features of length {} and {}", a.len(), b.len())));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `-l_t . target`.
pub fn transformation_loss(transformed: &[f64], target: &[f64]) -> Result<f64> {
    same_len(transformed, target)?;
    Ok(-dot(transformed, target))
}

/// Gradient of [`transformation_loss`] with respect to `transformed`.
pub fn transformation_loss_grad(target: &[f64]) -> Vec<f64> {
    target.iter().map(|t| -t).collect()
}

/// Cosine similarity of two nonzero vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    same_len(a, b)?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(dot(a, b) / (na * nb))
}

/// Binary cross-entropy of `r` against a similarity `d`, clamped to `[0, 1]`,
/// with its derivative in `d`. Log arguments below [`LOG_EPS`] contribute the
/// constant `-ln(LOG_EPS)` and no gradient.
pub fn clamped_bce(r: bool, d: f64) -> (f64, f64) {
    let d = d.clamp(0.0, 1.0);
    if r {
        if d > LOG_EPS {
            (-d.ln(), -1.0 / d)
        } else {
            (-LOG_EPS.ln(), 0.0)
        }
    } else if 1.0 - d > LOG_EPS {
        (-(1.0 - d).ln(), 1.0 / (1.0 - d))
    } else {
        (-LOG_EPS.ln(), 0.0)
    }
}

/// Binary cross-entropy of relation `r` against the cosine similarity of
/// `li` and `lj`.
pub fn separability_loss(r: bool, li: &[f64], lj: &[f64]) -> Result<f64> {
    Ok(separability_loss_grad(r, li, lj)?.0)
}

/// [`separability_loss`] plus its gradients with respect to `li` and `lj`.
pub fn separability_loss_grad(r: bool, li: &[f64], lj: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    same_len(li, lj)?;
    let (ni, nj) = (norm(li), norm(lj));
    if ni == 0.0 || nj == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let d = (dot(li, lj) / (ni * nj)).clamp(0.0, 1.0);
    let (value, dd) = clamped_bce(r, d);
    // d(cos)/d(li) = (lj_hat - d * li_hat) / |li|
    let gi = li
        .iter()
        .zip(lj)
        .map(|(a, b)| dd * (b / nj - d * a / ni) / ni)
        .collect();
    let gj = lj
        .iter()
        .zip(li)
        .map(|(b, a)| dd * (a / ni - d * b / nj) / nj)
        .collect();
    Ok((value, gi, gj))
}

/// Column means of a feature matrix.
pub fn mean_assignment(features: ArrayView2<'_, f64>) -> Array1<f64> {
    features.mean_axis(Axis(0)).expect("nonempty")
}

/// `sum_h p_h log p_h` with `p` the mean label feature; `0 log 0 = 0`.
pub fn entropy_loss(features: ArrayView2<'_, f64>) -> Result<f64> {
    Ok(entropy_loss_grad(features)?.0)
}

/// [`entropy_loss`] plus its gradient with respect to every feature row.
pub fn entropy_loss_grad(features: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)> {
    let m = features.nrows();
    if m == 0 || features.ncols() == 0 {
        return Err(Error::EmptyInput);
    }
    let p = mean_assignment(features);
    let value = p.iter().map(|&ph| if ph > 0.0 { ph * ph.ln() } else { 0.0 }).sum();
    let col: Array1<f64> = p.mapv(|ph| (ph.max(LOG_EPS).ln() + 1.0) / m as f64);
    let grad = Array2::from_shape_fn(features.raw_dim(), |(_, h)| col[h]);
    Ok((value, grad))
}

/// Convenience wrapper over a list of label features.
pub fn entropy_of(features: &[&[f64]]) -> Result<f64> {
    let k = features.first().ok_or(Error::EmptyInput)?.len();
    let mut mat = Array2::zeros((features.len(), k));
    for (i, f) in features.iter().enumerate() {
        same_len(f, features[0])?;
        mat.row_mut(i).assign(&ArrayView1::from(*f));
    }
    entropy_loss(mat.view())
}

/// Mean per-class binary cross-entropy of `attended` against `target`.
pub fn attention_loss(attended: &[f64], target: &[f64]) -> Result<f64> {
    Ok(attention_loss_grad(attended, target)?.0)
}

/// [`attention_loss`] plus its gradient with respect to `attended`.
pub fn attention_loss_grad(attended: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    same_len(attended, target)?;
    let k = attended.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(attended.len());
    for (&a, &t) in attended.iter().zip(target) {
        let inside = a > LOG_EPS && a < 1.0 - LOG_EPS;
        let ac = a.clamp(LOG_EPS, 1.0 - LOG_EPS);
        value += -t * ac.ln() - (1.0 - t) * (1.0 - ac).ln();
        grad.push(if inside { (-t / ac + (1.0 - t) / (1.0 - ac)) / k } else { 0.0 });
    }
    Ok((value / k, grad))
}

/// Gradients of the total loss with respect to both heads' outputs.
#[derive(Clone, Debug)]
pub struct LossGradients {
    pub label: Array2<f64>,
    pub attention_label: Array2<f64>,
}

/// Network predictions for one mini-batch, tagged with dataset sample ids.
#[derive(Clone, Debug)]
pub struct BatchPredictions<'a> {
    pub label: ArrayView2<'a, f64>,
    pub attention_label: ArrayView2<'a, f64>,
    pub sample_indices: &'a [usize],
}

/// Weighted total loss over one mini-batch and its gradients.
///
/// `L_R` averages over all ordered pairs including `i = j`; `L_T` and `L_A`
/// average over samples; `L_E` sums the entropy terms of both heads.
pub fn total_loss(
    batch: &BatchPredictions<'_>,
    targets: &PseudoTargetSet,
    weights: &LossWeights,
) -> Result<(LossBreakdown, LossGradients)> {
    let m = batch.label.nrows();
    if m == 0 {
        return Err(Error::EmptyInput);
    }
    if batch.sample_indices != targets.sample_indices.as_slice() {
        return Err(Error::Shape("targets are not aligned with the batch sample indices".into()));
    }
    let k = batch.label.ncols();
    if batch.attention_label.dim() != (m, k) || targets.balanced.dim() != (m, k) || targets.attention.dim() != (m, k) {
        return Err(Error::Shape("prediction and target matrices disagree in shape".into()));
    }
    let mut g_label = Array2::<f64>::zeros((m, k));
    let mut g_att = Array2::<f64>::zeros((m, k));

    let pair_scale = 1.0 / (m * m) as f64;
    let mut l_r = 0.0;
    let rows: Vec<Vec<f64>> = batch.label.rows().into_iter().map(|r| r.to_vec()).collect();
    for i in 0..m {
        for j in 0..m {
            let (v, gi, gj) = separability_loss_grad(targets.relations.related(i, j), &rows[i], &rows[j])?;
            l_r += v;
            for h in 0..k {
                g_label[[i, h]] += pair_scale * gi[h];
                g_label[[j, h]] += pair_scale * gj[h];
            }
        }
    }
    l_r *= pair_scale;

    let sample_scale = 1.0 / m as f64;
    let mut l_t = 0.0;
    let mut l_a = 0.0;
    for i in 0..m {
        let target = targets.balanced.row(i).to_vec();
        l_t += transformation_loss(&rows[i], &target)?;
        for (h, g) in transformation_loss_grad(&target).into_iter().enumerate() {
            g_label[[i, h]] += weights.transformation * sample_scale * g;
        }
        let att = batch.attention_label.row(i).to_vec();
        let (v, g) = attention_loss_grad(&att, &targets.attention.row(i).to_vec())?;
        l_a += v;
        for (h, gv) in g.into_iter().enumerate() {
            g_att[[i, h]] += weights.attention * sample_scale * gv;
        }
    }
    l_t *= sample_scale;
    l_a *= sample_scale;

    let (e_label, ge_label) = entropy_loss_grad(batch.label)?;
    let (e_att, ge_att) = entropy_loss_grad(batch.attention_label)?;
    g_label.scaled_add(weights.entropy, &ge_label);
    g_att.scaled_add(weights.entropy, &ge_att);

    let breakdown = LossBreakdown::compose(l_r, l_t, l_a, e_label + e_att, weights);
    Ok((breakdown, LossGradients { label: g_label, attention_label: g_att }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pseudo_targets::RelationMatrix;
    use ndarray::array;

    #[test]
    fn transformation_hand_values() {
        assert_eq!(transformation_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), -1.0);
        assert!((transformation_loss(&[0.7, 0.3], &[0.6, 0.4]).unwrap() + 0.54).abs() < 1e-12);
        assert_eq!(transformation_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(transformation_loss(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn separability_hand_values() {
        assert!(separability_loss(true, &[1.0, 0.0], &[1.0, 0.0]).unwrap() < 1e-6);
        assert!(separability_loss(false, &[1.0, 0.0], &[0.0, 1.0]).unwrap() < 1e-6);
        // cos((1,0), (1,1)/sqrt 2 ... ) chosen to give d = 0.5: angle of 60 degrees.
        let b = [0.5, (3.0f64).sqrt() / 2.0];
        let v = separability_loss(true, &[1.0, 0.0], &b).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
        assert!(matches!(separability_loss(true, &[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroNorm)));
    }

    #[test]
    fn entropy_hand_values() {
        let two = array![[1.0, 0.0], [0.0, 1.0]];
        assert!((entropy_loss(two.view()).unwrap() + 2f64.ln()).abs() < 1e-12);
        let collapsed = array![[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        assert_eq!(entropy_loss(collapsed.view()).unwrap(), 0.0);
        let ten = Array2::from_shape_fn((10, 10), |(i, j)| if i == j { 1.0 } else { 0.0 });
        assert!((entropy_loss(ten.view()).unwrap() + 10f64.ln()).abs() < 1e-12);
        assert!(entropy_of(&[]).is_err());
    }

    #[test]
    fn attention_hand_values() {
        assert!((attention_loss(&[0.5, 0.5], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(attention_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap() < 1e-6);
        assert!((attention_loss(&[0.5, 0.5], &[1.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    fn targets_for(features: &Array2<f64>, assignments: Vec<usize>) -> PseudoTargetSet {
        let m = features.nrows();
        PseudoTargetSet {
            balanced: features.clone(),
            relations: RelationMatrix::from_assignments(assignments),
            attention: features.clone(),
            sample_indices: (0..m).collect(),
        }
    }

    #[test]
    fn total_only_entropy_on_balanced_one_hots() {
        let l = Array2::from_shape_fn((3, 3), |(i, j)| if i == j { 1.0 } else { 0.0 });
        let targets = targets_for(&l, vec![0, 1, 2]);
        let idx: Vec<usize> = (0..3).collect();
        let batch = BatchPredictions { label: l.view(), attention_label: l.view(), sample_indices: &idx };
        let w = LossWeights { transformation: 0.0, attention: 0.0, entropy: 3.0 };
        let (b, _) = total_loss(&batch, &targets, &w).unwrap();
        assert!((b.total - 2.0 * -(3f64.ln()) * 3.0).abs() < 1e-6);
    }

    #[test]
    fn total_single_pair_identical() {
        let l = array![[1.0, 0.0]];
        let targets = targets_for(&l, vec![0]);
        let idx = [7usize];
        let mut targets = targets;
        targets.sample_indices = vec![7];
        let batch = BatchPredictions { label: l.view(), attention_label: l.view(), sample_indices: &idx };
        let (b, _) = total_loss(&batch, &targets, &LossWeights::default()).unwrap();
        assert!(b.l_r < 1e-6);
        assert_eq!(b.l_t, -1.0);
        let w = LossWeights::default();
        assert!((b.total - (b.l_r + w.transformation * b.l_t + w.attention * b.l_a + w.entropy * b.l_e)).abs() < 1e-12);
    }

    #[test]
    fn misaligned_targets_rejected() {
        let l = array![[0.6, 0.4], [0.3, 0.7]];
        let targets = targets_for(&l, vec![0, 1]);
        let idx = [1usize, 0];
        let batch = BatchPredictions { label: l.view(), attention_label: l.view(), sample_indices: &idx };
        assert!(total_loss(&batch, &targets, &LossWeights::default()).is_err());
    }

    #[test]
    fn negative_weights_invalid() {
        assert!(LossWeights { transformation: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }
}
