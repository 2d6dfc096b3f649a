use std::path::PathBuf;

use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gaussclust::config::{DataSource, ModelChoice, RunConfig};
use gaussclust::datasets::{transform_image, TransformConfig};
use gaussclust::metrics::{accuracy, ari, nmi, ContingencyTable};
use gaussclust::pseudo_targets::{balanced_target, confident_attention_target, relations_by_kmeans};
use gaussclust::theoremlab::{run_trial_traced, InitMode, Regime, RelationMode, TrialSpec};
use gaussclust::trainer::TrainConfig;
use gaussclust::viz::map_to_2d;

fn image(c: usize, h: usize, w: usize) -> impl Strategy<Value = Array3<f32>> {
    prop::collection::vec(0.0f32..=1.0, c * h * w).prop_map(move |v| Array3::from_shape_vec((c, h, w), v).unwrap())
}

fn labels(n: std::ops::RangeInclusive<usize>, k: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..k, n)
}

fn feature_rows(m: std::ops::RangeInclusive<usize>, k: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(prop::collection::vec(0.01f64..1.0, k), m).prop_map(move |rows| {
        let n = rows.len();
        let flat: Vec<f64> = rows
            .into_iter()
            .flat_map(|r| {
                let s: f64 = r.iter().sum();
                r.into_iter().map(move |x| x / s)
            })
            .collect();
        Array2::from_shape_vec((n, k), flat).unwrap()
    })
}

/// Brute-force best one-to-one mapping score.
fn exhaustive_matches(pred: &[usize], truth: &[usize], k: usize) -> usize {
    fn permute(k: usize, used: &mut Vec<bool>, perm: &mut Vec<usize>, best: &mut usize, counts: &[Vec<usize>]) {
        if perm.len() == k {
            *best = (*best).max((0..k).map(|p| counts[p][perm[p]]).sum());
            return;
        }
        for t in 0..k {
            if !used[t] {
                used[t] = true;
                perm.push(t);
                permute(k, used, perm, best, counts);
                perm.pop();
                used[t] = false;
            }
        }
    }
    let mut counts = vec![vec![0usize; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        counts[p][t] += 1;
    }
    let mut best = 0;
    permute(k, &mut vec![false; k], &mut Vec::new(), &mut best, &counts);
    best
}

/// Greedy mapping: repeatedly take the largest remaining cell.
fn greedy_matches(pred: &[usize], truth: &[usize]) -> usize {
    let table = ContingencyTable::new(pred, truth).unwrap();
    let mut counts = table.counts.clone();
    let mut total = 0;
    loop {
        let best = counts.indexed_iter().max_by_key(|(_, &c)| c).map(|((i, j), &c)| (i, j, c));
        match best {
            Some((i, j, c)) if c > 0 => {
                total += c as usize;
                counts.row_mut(i).fill(0);
                counts.column_mut(j).fill(0);
            }
            _ => return total,
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transformed_pixels_stay_in_unit_interval(img in image(3, 12, 12), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = transform_image(img.view(), &TransformConfig::default(), &mut rng);
        prop_assert_eq!(out.dim(), img.dim());
        prop_assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn identity_transform_is_exact(img in image(1, 10, 9), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = transform_image(img.view(), &TransformConfig::identity(), &mut rng);
        prop_assert_eq!(out, img);
    }

    #[test]
    fn metrics_ignore_cluster_names(truth in labels(2..=40, 4), pred in labels(2..=40, 4), shift in 1usize..4) {
        let n = truth.len().min(pred.len());
        let (truth, pred) = (&truth[..n], &pred[..n]);
        let renamed: Vec<usize> = pred.iter().map(|&p| (p + shift) % 4 + 10).collect();
        prop_assert!((accuracy(pred, truth).unwrap().0 - accuracy(&renamed, truth).unwrap().0).abs() < 1e-12);
        prop_assert!((nmi(pred, truth).unwrap() - nmi(&renamed, truth).unwrap()).abs() < 1e-12);
        prop_assert!((ari(pred, truth).unwrap() - ari(&renamed, truth).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn hungarian_is_optimal(k in 2usize..=5, seed in any::<u64>(), n in 1usize..30) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let acc = accuracy(&pred, &truth).unwrap().0;
        let exhaustive = exhaustive_matches(&pred, &truth, k) as f64 / n as f64;
        prop_assert!((acc - exhaustive).abs() < 1e-12);
        prop_assert!(acc + 1e-12 >= greedy_matches(&pred, &truth) as f64 / n as f64);
    }

    #[test]
    fn nmi_is_symmetric_and_bounded(a in labels(2..=50, 5), b in labels(2..=50, 3)) {
        let n = a.len().min(b.len());
        let (a, b) = (&a[..n], &b[..n]);
        let ab = nmi(a, b).unwrap();
        prop_assert!((ab - nmi(b, a).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn planar_map_stays_in_unit_disk(l in feature_rows(1..=1, 6)) {
        let (x, y) = map_to_2d(&l.row(0).to_vec());
        prop_assert!(x * x + y * y <= 1.0 + 1e-12);
    }

    #[test]
    fn relations_are_an_equivalence(l in feature_rows(3..=20, 3), seed in any::<u64>()) {
        let r = relations_by_kmeans(l.view(), 3, seed).unwrap();
        let n = r.len();
        for i in 0..n {
            prop_assert!(r.related(i, i));
            for j in 0..n {
                prop_assert_eq!(r.related(i, j), r.related(j, i));
                for t in 0..n {
                    if r.related(i, j) && r.related(j, t) {
                        prop_assert!(r.related(i, t));
                    }
                }
            }
        }
    }

    #[test]
    fn targets_are_row_stochastic(l in feature_rows(1..=30, 4)) {
        for t in [balanced_target(l.view()).unwrap(), confident_attention_target(l.view()).unwrap()] {
            prop_assert_eq!(t.dim(), l.dim());
            for row in t.rows() {
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.sum() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn config_round_trips(seed in any::<u32>(), epochs in 1usize..50, k in 2usize..8, m2 in 1usize..64, lr in 1e-5f64..1e-1) {
        let cfg = RunConfig {
            seed: seed as u64,
            output_dir: PathBuf::from("runs"),
            dataset: DataSource::Synthetic { cluster_count: k, n_per_class: 10, image_size: 32, seed: 1 },
            model: ModelChoice::Small,
            train: TrainConfig { epochs, mini_batch: m2, macro_batch: 128, learning_rate: lr, ..Default::default() },
        };
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn line_search_never_increases_gat_objective(seed in any::<u64>(), near in any::<bool>()) {
        let spec = TrialSpec {
            init: if near { InitMode::NearCollapse } else { InitMode::Random },
            iterations: 60,
            ..TrialSpec::new(12, 3, Regime::Gat, RelationMode::GroundTruth, seed)
        };
        let (_, trace) = run_trial_traced(&spec, 3.0).unwrap();
        prop_assert!(!trace.is_empty());
        for w in trace.windows(2) {
            prop_assert!(w[0].1 < w[0].0);
            prop_assert!((w[0].1 - w[1].0).abs() < 1e-9);
        }
    }
}
