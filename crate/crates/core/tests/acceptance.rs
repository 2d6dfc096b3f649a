//! Acceptance suite: prints one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line is shown. The process fails
//! when a criterion fails, except those listed in [`KNOWN_RED`], which are
//! reported as FAIL but do not abort the suite.

mod common;

use std::collections::BTreeSet;
use std::f64::consts::LN_2;
use std::time::Instant;

use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gaussclust::datasets::make_synthetic_shapes;
use gaussclust::losses::{attention_loss, entropy_loss, separability_loss, transformation_loss};
use gaussclust::metrics::{accuracy, ari, evaluate, nmi, report};
use gaussclust::model::{Model, ModelConfig};
use gaussclust::pseudo_targets::{
    balanced_target, batched_label_features, confident_attention_target, relations_by_kmeans,
};
use gaussclust::theoremlab::{
    all_ones_relations, balanced_one_hot, collapsed_features, dac_objective_of, gat_objective_of,
    ground_truth_relations, run_trial, Regime, RelationMode, TrialSpec,
};
use gaussclust::trainer::{final_inference, TrainConfig, Trainer};
use gaussclust::viz::map_to_2d;

/// Criteria that are reported but expected to stay red; see the project notes.
const KNOWN_RED: &[u32] = &[7];

const LOSS_TOL: f64 = 1e-6;
const TARGET_TOL: f64 = 1e-4;
const SPLIT_TOL: f64 = 1e-6;
const MAP_TOL: f64 = 1e-9;
const E2E_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const E2E_EPOCHS: usize = 15;
const E2E_MEDIAN_ACC: f64 = 0.90;
const ABLATION_MARGIN: f64 = 0.02;
const E2E_SECONDS_PER_SEED: f64 = 15.0 * 60.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn c1_loss_oracles() -> Outcome {
    let sqrt3 = 3f64.sqrt();
    let ten = Array2::from_shape_fn((10, 10), |(i, j)| (i == j) as u8 as f64);
    let checks = [
        ("L_T aligned", transformation_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), -1.0),
        ("L_T hand", transformation_loss(&[0.7, 0.3], &[0.6, 0.4]).unwrap(), -0.54),
        ("L_T orthogonal", transformation_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0),
        ("L_R match", separability_loss(true, &[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0),
        ("L_R separated", separability_loss(false, &[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0),
        ("L_R d=0.5", separability_loss(true, &[1.0, 0.0], &[0.5, sqrt3 / 2.0]).unwrap(), LN_2),
        ("L_E two", entropy_loss(array![[1.0, 0.0], [0.0, 1.0]].view()).unwrap(), -LN_2),
        ("L_E collapsed", entropy_loss(array![[1.0, 0.0], [1.0, 0.0]].view()).unwrap(), 0.0),
        ("L_E ten", entropy_loss(ten.view()).unwrap(), -(10f64.ln())),
        ("L_A uniform", attention_loss(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), LN_2),
        ("L_A match", attention_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0),
        ("L_A hand", attention_loss(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), LN_2),
    ];
    let bad: Vec<_> = checks.iter().filter(|(_, got, want)| !close(*got, *want, LOSS_TOL)).map(|c| c.0).collect();
    outcome(bad.is_empty(), format!("{} oracles, off: {bad:?}", checks.len()))
}

fn c2_gradients() -> Outcome {
    let mut worst_overall = 0.0f64;
    let mut parts = Vec::new();
    for (i, (name, check)) in common::GRADIENT_CHECKS.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(7 + i as u64);
        let err = common::worst(100, &mut rng, *check);
        worst_overall = worst_overall.max(err);
        parts.push(format!("{name} {err:.1e}"));
    }
    outcome(worst_overall < common::GRAD_TOLERANCE, format!("100 configs each, worst rel err: {}", parts.join(", ")))
}

fn c3_pseudo_targets() -> Outcome {
    let uniform = array![[0.7, 0.3], [0.3, 0.7]];
    let identity = balanced_target(uniform.view()).unwrap() == uniform;
    let hand = balanced_target(array![[0.6, 0.4], [0.6, 0.4]].view()).unwrap();
    let balanced_ok = close(hand[[0, 0]], 0.5, TARGET_TOL) && close(hand[[0, 1]], 0.5, TARGET_TOL);
    let conf = confident_attention_target(array![[0.8, 0.2], [0.2, 0.8]].view()).unwrap();
    let confident_ok = close(conf[[0, 0]], 0.9412, TARGET_TOL) && close(conf[[0, 1]], 0.0588, TARGET_TOL);

    let data = make_synthetic_shapes(3, 20, 64, 5).unwrap();
    let model = Model::new(ModelConfig::small(64, 1, 3), 5).unwrap();
    let indices = data.all_indices();
    let m = indices.len();
    let whole = batched_label_features(&model, &data, &indices, m).unwrap();
    let mut split_err = 0.0f64;
    for m1 in [1, 7] {
        let f = batched_label_features(&model, &data, &indices, m1).unwrap();
        split_err = split_err.max((&f - &whole).mapv(f64::abs).fold(0.0, |a, &b| a.max(b)));
    }
    let pass = identity && balanced_ok && confident_ok && split_err < SPLIT_TOL;
    outcome(
        pass,
        format!(
            "identity {identity}, (0.6,0.4)->({:.4},{:.4}), (0.8,0.2)->({:.4},{:.4}), split max diff {split_err:.1e} over m1 in {{1,7,{m}}}",
            hand[[0, 0]],
            hand[[0, 1]],
            conf[[0, 0]],
            conf[[0, 1]]
        ),
    )
}

fn c4_theorem_lab() -> Outcome {
    let start = Instant::now();
    let (n, k, lambda) = (60, 3, 3.0);
    let collapsed = collapsed_features(n, k, 0);
    let self_r = relations_by_kmeans(collapsed.view(), k, 0).unwrap();
    let witness = dac_objective_of(collapsed.view(), &self_r).unwrap();
    let a = witness == 0.0;

    let balanced = balanced_one_hot(n, k);
    let balanced_self = relations_by_kmeans(balanced.view(), k, 0).unwrap();
    let gt = ground_truth_relations(n, k);
    let best_balanced = gat_objective_of(balanced.view(), &balanced_self, lambda)
        .unwrap()
        .max(gat_objective_of(balanced.view(), &gt, lambda).unwrap());
    let mut best_collapsed = f64::INFINITY;
    for h in 0..k {
        let c = collapsed_features(n, k, h);
        let own = relations_by_kmeans(c.view(), k, 0).unwrap();
        for r in [&own, &gt, &all_ones_relations(n)] {
            best_collapsed = best_collapsed.min(gat_objective_of(c.view(), r, lambda).unwrap());
        }
    }
    let b = best_balanced < best_collapsed;

    let seeds = 20;
    let successes = (0..seeds)
        .filter(|&seed| {
            let v = run_trial(&TrialSpec::new(n, k, Regime::Gat, RelationMode::GroundTruth, seed)).unwrap();
            v.valid && v.one_hot_fraction >= 0.95 && v.occupied_clusters == k
        })
        .count();
    let c = successes as f64 >= 0.9 * seeds as f64;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        a && b && c && secs < 300.0,
        format!(
            "(a) dac witness = {witness}; (b) balanced {best_balanced:.4} vs best collapsed {best_collapsed:.4}; (c) {successes}/{seeds} seeds one-hot with {k} clusters; {secs:.0}s"
        ),
    )
}

/// ARI by enumerating every sample pair.
fn pair_counting_ari(pred: &[usize], truth: &[usize]) -> f64 {
    let n = pred.len();
    let (mut both, mut same_pred, mut same_truth, mut total) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let sp = pred[i] == pred[j];
            let st = truth[i] == truth[j];
            both += (sp && st) as u8 as f64;
            same_pred += sp as u8 as f64;
            same_truth += st as u8 as f64;
            total += 1.0;
        }
    }
    let expected = same_pred * same_truth / total;
    let max = 0.5 * (same_pred + same_truth);
    if max == expected {
        1.0
    } else {
        (both - expected) / (max - expected)
    }
}

fn c5_metrics() -> Outcome {
    let perm = accuracy(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap().0;
    let three_quarters = accuracy(&[0, 0, 0, 1], &[0, 0, 1, 1]).unwrap().0;
    // the two possible one-to-one mappings of {0, 1}
    let exhaustive: f64 = [[0usize, 1], [1, 0]]
        .iter()
        .map(|map| {
            let pred = [0usize, 0, 0, 1];
            let truth = [0usize, 0, 1, 1];
            pred.iter().zip(&truth).filter(|(p, t)| map[**p] == **t).count() as f64 / 4.0
        })
        .fold(0.0, f64::max);
    let independent = nmi(&[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap();
    let single = ari(&[0, 0, 0, 0, 0], &[0, 1, 0, 1, 2]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(2..=30);
        let (kp, kt) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..kp)).collect();
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..kt)).collect();
        worst = worst.max((ari(&pred, &truth).unwrap() - pair_counting_ari(&pred, &truth)).abs());
    }
    let pass = perm == 1.0
        && close(three_quarters, 0.75, 1e-12)
        && three_quarters == exhaustive
        && independent.abs() < 1e-12
        && single.abs() < 1e-12
        && worst < 1e-9;
    outcome(
        pass,
        format!(
            "perm acc {perm}, acc {three_quarters} (exhaustive {exhaustive}), independent nmi {independent:.1e}, single-cluster ari {single:.1e}, pair-count max diff {worst:.1e} on 50 instances"
        ),
    )
}

struct RunResult {
    acc: f64,
    occupied: usize,
    step1_peak: usize,
    seconds: f64,
}

fn train_synthetic(seed: u64, attention: f64, entropy: f64) -> RunResult {
    let start = Instant::now();
    let data = make_synthetic_shapes(3, 200, 64, seed).unwrap();
    let model = Model::new(ModelConfig::small(64, 1, 3), seed).unwrap();
    let mut cfg =
        TrainConfig { epochs: E2E_EPOCHS, macro_batch: 600, sub_batch: 100, mini_batch: 32, seed, ..Default::default() };
    cfg.weights.attention = attention;
    cfg.weights.entropy = entropy;
    let mut trainer = Trainer::new(&data, model, cfg).unwrap();
    trainer.run().unwrap();
    let ids = final_inference(trainer.model(), &data, 100).unwrap();
    let acc = evaluate(&ids, data.ground_truth().unwrap()).unwrap().acc;
    let occupied = ids.iter().collect::<BTreeSet<_>>().len();
    RunResult { acc, occupied, step1_peak: trainer.step1_peak_images(), seconds: start.elapsed().as_secs_f64() }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn fmt_runs(runs: &[RunResult]) -> String {
    runs.iter().map(|r| format!("{:.3}/{}", r.acc, r.occupied)).collect::<Vec<_>>().join(" ")
}

fn c6_end_to_end(full: &[RunResult], no_attention: &[RunResult]) -> Outcome {
    let m_full = median(full.iter().map(|r| r.acc).collect());
    let m_abl = median(no_attention.iter().map(|r| r.acc).collect());
    let lower = m_abl <= m_full - ABLATION_MARGIN;
    let equal = (m_full - m_abl).abs() <= ABLATION_MARGIN;
    let slowest = full.iter().chain(no_attention).map(|r| r.seconds).fold(0.0, f64::max);
    let pass = m_full >= E2E_MEDIAN_ACC && (lower || equal) && slowest <= E2E_SECONDS_PER_SEED;
    let flag = if lower { "lower" } else if equal { "equal (flagged)" } else { "higher" };
    outcome(
        pass,
        format!(
            "median acc {m_full:.3} [acc/clusters: {}]; a2=0 median {m_abl:.3} [{}], ablation {flag}; slowest run {slowest:.0}s",
            fmt_runs(full),
            fmt_runs(no_attention)
        ),
    )
}

fn c7_entropy_guard(full: &[RunResult], no_entropy: &[RunResult]) -> Outcome {
    let collapsed = no_entropy.iter().filter(|r| r.occupied < 3).count();
    let full_collapsed = full.iter().filter(|r| r.occupied < 3).count();
    outcome(
        collapsed >= 3 && full_collapsed == 0,
        format!(
            "a3=0 collapsed in {collapsed}/{} seeds [{}]; a3=3 collapsed in {full_collapsed}/{}",
            no_entropy.len(),
            fmt_runs(no_entropy),
            full.len()
        ),
    )
}

fn c8_visualization(full: &[RunResult]) -> Outcome {
    let a = map_to_2d(&[0.0, 0.0, 0.0, 1.0]);
    let b = map_to_2d(&[1.0, 0.0, 0.0, 0.0]);
    let u = map_to_2d(&[0.25; 4]);
    let maps = close(a.0, 0.0, MAP_TOL)
        && close(a.1, 1.0, MAP_TOL)
        && close(b.0, 1.0, MAP_TOL)
        && close(b.1, 0.0, MAP_TOL)
        && close(u.0, 0.0, MAP_TOL)
        && close(u.1, 0.0, MAP_TOL);
    let peak = full.iter().map(|r| r.step1_peak).max().unwrap_or(0);
    let report_ok = report(&[0, 1], &[0, 1]).is_ok();
    outcome(
        maps && peak >= 1 && peak <= 100 && report_ok,
        format!("e4 -> ({:.1e},{:.3}), e1 -> ({:.3},{:.1e}), uniform -> ({:.1e},{:.1e}); Step-1 peak {peak} images (m1 = 100)", a.0, a.1, b.0, b.1, u.0, u.1),
    )
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut emit = |id: u32, name: &'static str, o: Outcome| {
        println!("criterion {id} [{name}]: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };
    emit(1, "loss oracles", c1_loss_oracles());
    emit(2, "gradient checks", c2_gradients());
    emit(3, "pseudo-targets", c3_pseudo_targets());
    emit(4, "theorem lab", c4_theorem_lab());
    emit(5, "metrics", c5_metrics());

    let full: Vec<RunResult> = E2E_SEEDS.iter().map(|&s| train_synthetic(s, 5.0, 3.0)).collect();
    let no_attention: Vec<RunResult> = E2E_SEEDS.iter().map(|&s| train_synthetic(s, 0.0, 3.0)).collect();
    emit(6, "end-to-end clustering", c6_end_to_end(&full, &no_attention));
    let no_entropy: Vec<RunResult> = E2E_SEEDS.iter().map(|&s| train_synthetic(s, 5.0, 0.0)).collect();
    emit(7, "entropy guard", c7_entropy_guard(&full, &no_entropy));
    emit(8, "visualization", c8_visualization(&full));

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    let blocking: Vec<u32> = failed.iter().copied().filter(|id| !KNOWN_RED.contains(id)).collect();
    println!(
        "acceptance: {}/{} criteria pass; failing {failed:?}; known red {KNOWN_RED:?}",
        results.len() - failed.len(),
        results.len()
    );
    for id in KNOWN_RED {
        if !failed.contains(id) {
            println!("acceptance: criterion {id} is listed as known red but passed");
        }
    }
    if !blocking.is_empty() {
        std::process::exit(1);
    }
}
