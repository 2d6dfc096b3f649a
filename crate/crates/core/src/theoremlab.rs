//! Direct optimisation of label-feature objectives over free per-sample
//! vectors, without images or a network.
//!
//! Two regimes are compared. Under `Dac` the features are nonnegative with
//! unit L2 norm (logits squared, then normalised) and the objective is the
//! pairwise cross-entropy on dot products alone, which a single shared
//! one-hot vector minimises. Under `Gat` features are softmax
//! probabilities, the pairwise term uses cosine similarity, and a confidence
//! reward plus an entropy penalty on the mean assignment are added.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kmeans::kmeans;
use crate::losses::{clamped_bce, LOG_EPS};
use crate::pseudo_targets::RelationMatrix;

/// Entries above this count as the hot entry of a one-hot row.
pub const ONE_HOT_THRESHOLD: f64 = 0.99;
pub const DEFAULT_STEP: f64 = 0.1;
pub const DEFAULT_ITERATIONS: usize = 2000;
pub const DEFAULT_ENTROPY_WEIGHT: f64 = 3.0;
const MAX_HALVINGS: usize = 40;
/// Sufficient-decrease fraction required before a step is accepted.
const ARMIJO: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Dac,
    Gat,
}

/// How the relation matrix is obtained during a trial.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationMode {
    /// Fixed from the balanced reference labels `i % k`.
    GroundTruth,
    /// Re-estimated by k-means on the current features before every step.
    SelfEstimated,
    /// Every pair related.
    AllOnes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Logits uniform over the feasible box.
    Random,
    /// Every row close to the first basis vector.
    NearCollapse,
}

/// Unconstrained logits, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FreeLabelMatrix {
    pub v: Array2<f64>,
}

impl FreeLabelMatrix {
    pub fn new(v: Array2<f64>) -> Result<Self> {
        if v.nrows() == 0 || v.ncols() < 2 {
            return Err(Error::Shape("need at least one row and two columns".into()));
        }
        Ok(Self { v })
    }

    pub fn rows(&self) -> usize {
        self.v.nrows()
    }

    pub fn k(&self) -> usize {
        self.v.ncols()
    }

    /// Features under the constraints of `regime`.
    pub fn realize(&self, regime: Regime) -> Array2<f64> {
        match regime {
            Regime::Gat => softmax_rows(self.v.view()),
            Regime::Dac => {
                let mut l = self.v.mapv(|x| x * x);
                for mut row in l.rows_mut() {
                    let n = row.dot(&row).sqrt();
                    if n > 0.0 {
                        row /= n;
                    }
                }
                l
            }
        }
    }
}

fn softmax_rows(v: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = v.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

fn check_relations(l: ArrayView2<'_, f64>, r: &RelationMatrix) -> Result<()> {
    if r.len() != l.nrows() {
        return Err(Error::Shape(format!("{} relations for {} rows", r.len(), l.nrows())));
    }
    Ok(())
}

/// Pairwise cross-entropy of the relations against `sim(i, j)` over all
/// ordered pairs, and its gradient with respect to the similarity matrix.
fn pairwise(sim: &Array2<f64>, r: &RelationMatrix) -> (f64, Array2<f64>) {
    let n = sim.nrows();
    let mut total = 0.0;
    let mut grad = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let (v, d) = clamped_bce(r.related(i, j), sim[[i, j]]);
            total += v;
            grad[[i, j]] = d;
        }
    }
    (total, grad)
}

/// Pairwise objective on raw dot products of realised features.
pub fn dac_objective_of(l: ArrayView2<'_, f64>, r: &RelationMatrix) -> Result<f64> {
    check_relations(l, r)?;
    Ok(pairwise(&l.dot(&l.t()), r).0)
}

pub fn dac_objective(v: &FreeLabelMatrix, r: &RelationMatrix) -> Result<f64> {
    dac_objective_of(v.realize(Regime::Dac).view(), r)
}

/// The three parts of the `Gat` objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatTerms {
    pub pairwise: f64,
    /// `-sum_i l_i . l_i`.
    pub confidence: f64,
    /// `weight * sum_h p_h ln p_h` for the mean assignment `p`.
    pub entropy: f64,
}

impl GatTerms {
    pub fn total(&self) -> f64 {
        self.pairwise + self.confidence + self.entropy
    }
}

fn unit_rows(l: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = l.map_axis(Axis(1), |row| row.dot(&row).sqrt());
    if norms.iter().any(|&n| n == 0.0) {
        return Err(Error::ZeroNorm);
    }
    let u = &l / &norms.view().insert_axis(Axis(1));
    Ok((u, norms))
}

pub fn gat_terms_of(l: ArrayView2<'_, f64>, r: &RelationMatrix, entropy_weight: f64) -> Result<GatTerms> {
    check_relations(l, r)?;
    let (u, _) = unit_rows(l)?;
    let pairwise = pairwise(&u.dot(&u.t()), r).0;
    let confidence = -l.iter().map(|x| x * x).sum::<f64>();
    let p = l.mean_axis(Axis(0)).expect("nonempty");
    let entropy = entropy_weight * p.iter().map(|&ph| ph * ph.max(LOG_EPS).ln()).sum::<f64>();
    Ok(GatTerms { pairwise, confidence, entropy })
}

pub fn gat_objective_of(l: ArrayView2<'_, f64>, r: &RelationMatrix, entropy_weight: f64) -> Result<f64> {
    Ok(gat_terms_of(l, r, entropy_weight)?.total())
}

pub fn gat_objective(v: &FreeLabelMatrix, r: &RelationMatrix, entropy_weight: f64) -> Result<f64> {
    gat_objective_of(v.realize(Regime::Gat).view(), r, entropy_weight)
}

/// Objective value and gradient with respect to the logits.
pub fn objective_and_grad(
    v: &FreeLabelMatrix,
    r: &RelationMatrix,
    regime: Regime,
    entropy_weight: f64,
) -> Result<(f64, Array2<f64>)> {
    let l = v.realize(regime);
    check_relations(l.view(), r)?;
    match regime {
        Regime::Dac => {
            let (value, g) = pairwise(&l.dot(&l.t()), r);
            let dl = (&g + &g.t()).dot(&l);
            // l = s / |s| with s = v^2
            let s = v.v.mapv(|x| x * x);
            let mut dv = Array2::zeros(v.v.raw_dim());
            for i in 0..l.nrows() {
                let ns = s.row(i).dot(&s.row(i)).sqrt();
                if ns == 0.0 {
                    continue;
                }
                let li = l.row(i);
                let proj = li.dot(&dl.row(i));
                for h in 0..l.ncols() {
                    let ds = (dl[[i, h]] - proj * li[h]) / ns;
                    dv[[i, h]] = 2.0 * v.v[[i, h]] * ds;
                }
            }
            Ok((value, dv))
        }
        Regime::Gat => {
            let terms = gat_terms_of(l.view(), r, entropy_weight)?;
            let (u, norms) = unit_rows(l.view())?;
            let (_, g) = pairwise(&u.dot(&u.t()), r);
            let du = (&g + &g.t()).dot(&u);
            let n = l.nrows() as f64;
            let p = l.mean_axis(Axis(0)).expect("nonempty");
            let dp = p.mapv(|ph| if ph > LOG_EPS { entropy_weight * (ph.ln() + 1.0) / n } else { 0.0 });
            let mut dv = Array2::zeros(v.v.raw_dim());
            for i in 0..l.nrows() {
                let ui = u.row(i);
                let proj = ui.dot(&du.row(i));
                let dl: Array1<f64> = (0..l.ncols())
                    .map(|h| (du[[i, h]] - proj * ui[h]) / norms[i] - 2.0 * l[[i, h]] + dp[h])
                    .collect();
                let li = l.row(i);
                let inner = li.dot(&dl);
                for h in 0..l.ncols() {
                    dv[[i, h]] = li[h] * (dl[h] - inner);
                }
            }
            Ok((terms.total(), dv))
        }
    }
}

/// Summary of a realised feature matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremVerdict {
    pub one_hot_fraction: f64,
    pub occupied_clusters: usize,
    pub collapsed: bool,
    pub final_objective: f64,
    /// False when the optimisation produced non-finite values.
    pub valid: bool,
}

impl TheoremVerdict {
    pub fn of(l: ArrayView2<'_, f64>, objective: f64) -> Self {
        let k = l.ncols();
        let valid = objective.is_finite() && l.iter().all(|x| x.is_finite());
        let mut occupied = vec![false; k];
        let mut one_hot = 0;
        for row in l.rows() {
            let (arg, max) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (h, &x)| if x > b.1 { (h, x) } else { b });
            occupied[arg] = true;
            if max > ONE_HOT_THRESHOLD {
                one_hot += 1;
            }
        }
        let occupied_clusters = occupied.iter().filter(|&&o| o).count();
        Self {
            one_hot_fraction: one_hot as f64 / l.nrows() as f64,
            occupied_clusters,
            collapsed: occupied_clusters < k,
            final_objective: objective,
            valid,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub n: usize,
    pub k: usize,
    pub regime: Regime,
    pub relations: RelationMode,
    pub init: InitMode,
    pub seed: u64,
    pub iterations: usize,
}

impl TrialSpec {
    pub fn new(n: usize, k: usize, regime: Regime, relations: RelationMode, seed: u64) -> Self {
        Self { n, k, regime, relations, init: InitMode::Random, seed, iterations: DEFAULT_ITERATIONS }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidConfig("k must be >= 2".into()));
        }
        if self.n < self.k {
            return Err(Error::TooFewSamples { needed: self.k, got: self.n });
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// Balanced reference partition `i % k`.
pub fn ground_truth_relations(n: usize, k: usize) -> RelationMatrix {
    RelationMatrix::from_assignments((0..n).map(|i| i % k).collect())
}

pub fn all_ones_relations(n: usize) -> RelationMatrix {
    RelationMatrix::from_assignments(vec![0; n])
}

/// Half-width of the box softmax logits are projected onto during `Gat`
/// trials. At a corner of the box the largest probability is at least
/// `200 / 201`, enough to count as one-hot, while every entry keeps a usable
/// gradient.
pub fn logit_bound(k: usize) -> f64 {
    (0.5 * (200.0 * (k as f64 - 1.0)).ln()).max(3.0)
}

fn initial_logits(spec: &TrialSpec, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let bound = logit_bound(spec.k);
    let mut noise = || -> f64 { rng.random_range(-1.0..1.0) };
    match spec.init {
        InitMode::Random => Array2::from_shape_fn((spec.n, spec.k), |_| bound * noise()),
        InitMode::NearCollapse => Array2::from_shape_fn((spec.n, spec.k), |(_, h)| {
            let base = if h == 0 { 4.0 } else { 0.0 };
            base + 0.01 * noise()
        }),
    }
}

fn relations_for(spec: &TrialSpec, l: ArrayView2<'_, f64>, seed: u64) -> Result<RelationMatrix> {
    Ok(match spec.relations {
        RelationMode::GroundTruth => ground_truth_relations(spec.n, spec.k),
        RelationMode::AllOnes => all_ones_relations(spec.n),
        RelationMode::SelfEstimated => RelationMatrix::from_assignments(kmeans(l, spec.k, seed)?.assignments),
    })
}

/// Full-batch projected gradient descent from `spec.init`. Each step starts
/// at [`DEFAULT_STEP`] and is halved until it gives a sufficient decrease.
pub fn run_trial(spec: &TrialSpec) -> Result<TheoremVerdict> {
    run_trial_with(spec, DEFAULT_ENTROPY_WEIGHT)
}

pub fn run_trial_with(spec: &TrialSpec, entropy_weight: f64) -> Result<TheoremVerdict> {
    Ok(run_trial_traced(spec, entropy_weight)?.0)
}

/// [`run_trial_with`] plus `(before, after)` objective values of every
/// accepted step, both under the relations used for that step.
pub fn run_trial_traced(spec: &TrialSpec, entropy_weight: f64) -> Result<(TheoremVerdict, Vec<(f64, f64)>)> {
    spec.validate()?;
    let mut trace = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut v = FreeLabelMatrix::new(initial_logits(spec, &mut rng))?;
    let bound = match spec.regime {
        Regime::Gat => logit_bound(spec.k),
        Regime::Dac => f64::INFINITY,
    };
    let objective = |v: &FreeLabelMatrix, r: &RelationMatrix| -> Result<f64> {
        match spec.regime {
            Regime::Dac => dac_objective(v, r),
            Regime::Gat => gat_objective(v, r, entropy_weight),
        }
    };
    let mut r = relations_for(spec, v.realize(spec.regime).view(), spec.seed)?;
    for it in 0..spec.iterations {
        if spec.relations == RelationMode::SelfEstimated && it > 0 {
            r = relations_for(spec, v.realize(spec.regime).view(), spec.seed.wrapping_add(it as u64))?;
        }
        let (current, grad) = objective_and_grad(&v, &r, spec.regime, entropy_weight)?;
        if !current.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            let l = v.realize(spec.regime);
            return Ok((TheoremVerdict { valid: false, ..TheoremVerdict::of(l.view(), f64::NAN) }, trace));
        }
        let grad_sq = grad.iter().map(|g| g * g).sum::<f64>();
        let mut step = DEFAULT_STEP;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let candidate = FreeLabelMatrix { v: (&v.v - &(&grad * step)).mapv(|x| x.clamp(-bound, bound)) };
            let next = objective(&candidate, &r)?;
            if next <= current - ARMIJO * step * grad_sq {
                trace.push((current, next));
                v = candidate;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted && spec.relations != RelationMode::SelfEstimated {
            break;
        }
    }
    let l = v.realize(spec.regime);
    Ok((TheoremVerdict::of(l.view(), objective(&v, &r)?), trace))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub spec: TrialSpec,
    pub verdict: TheoremVerdict,
}

/// Aggregate over the trials sharing a setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub k: usize,
    pub regime: Regime,
    pub relations: RelationMode,
    pub init: InitMode,
    pub trials: usize,
    pub mean_one_hot_fraction: f64,
    pub collapsed_fraction: f64,
    /// Trials ending with one-hot fraction at least 0.95 and all clusters used.
    pub success_fraction: f64,
    pub invalid: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub trials: Vec<TrialResult>,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "n,k,regime,relations,init,trials,mean_one_hot_fraction,collapsed_fraction,success_fraction,invalid\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:?},{:?},{:?},{},{},{},{},{}\n",
                r.n,
                r.k,
                r.regime,
                r.relations,
                r.init,
                r.trials,
                r.mean_one_hot_fraction,
                r.collapsed_fraction,
                r.success_fraction,
                r.invalid
            ));
        }
        out
    }
}

/// Runs every trial and groups the verdicts by setting, in first-seen order.
pub fn sweep(grid: &[TrialSpec]) -> Result<SweepTable> {
    let trials = grid
        .iter()
        .map(|spec| Ok(TrialResult { spec: spec.clone(), verdict: run_trial(spec)? }))
        .collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<(TrialSpec, Vec<&TheoremVerdict>)> = Vec::new();
    for t in &trials {
        let key = TrialSpec { seed: 0, ..t.spec.clone() };
        match rows.iter_mut().find(|(s, _)| *s == key) {
            Some((_, vs)) => vs.push(&t.verdict),
            None => rows.push((key, vec![&t.verdict])),
        }
    }
    let rows = rows
        .into_iter()
        .map(|(s, vs)| {
            let count = vs.len() as f64;
            SweepRow {
                n: s.n,
                k: s.k,
                regime: s.regime,
                relations: s.relations,
                init: s.init,
                trials: vs.len(),
                mean_one_hot_fraction: vs.iter().map(|v| v.one_hot_fraction).sum::<f64>() / count,
                collapsed_fraction: vs.iter().filter(|v| v.collapsed).count() as f64 / count,
                success_fraction: vs
                    .iter()
                    .filter(|v| v.valid && v.one_hot_fraction >= 0.95 && !v.collapsed)
                    .count() as f64
                    / count,
                invalid: vs.iter().filter(|v| !v.valid).count(),
            }
        })
        .collect();
    Ok(SweepTable { trials, rows })
}

/// `n` rows equal to the `h`-th basis vector.
pub fn collapsed_features(n: usize, k: usize, h: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, k), |(_, c)| (c == h) as u8 as f64)
}

/// Balanced one-hot rows, sample `i` in cluster `i % k`.
pub fn balanced_one_hot(n: usize, k: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, k), |(i, c)| (c == i % k) as u8 as f64)
}
