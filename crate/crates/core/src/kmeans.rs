//! Lloyd's k-means with k-means++ seeding.

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 100;
pub const TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Array2<f64>,
    pub iterations: usize,
}

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: ndarray::ArrayView1<'_, f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centre) in centroids.outer_iter().enumerate() {
        let d = sq_dist(point, centre);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn seed_centroids(data: ArrayView2<'_, f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = data.nrows();
    let mut centroids = Array2::zeros((k, data.ncols()));
    centroids.row_mut(0).assign(&data.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = data.outer_iter().map(|p| sq_dist(p, centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&data.row(pick));
        for (i, p) in data.outer_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centroids.row(c)));
        }
    }
    centroids
}

/// Clusters the rows of `data` into `k` groups, deterministically in `seed`.
///
/// A cluster left empty by an update is re-seeded at the point farthest from
/// its centroid, provided that point is not already on its centroid.
pub fn kmeans(data: ArrayView2<'_, f64>, k: usize, seed: u64) -> Result<KMeans> {
    let n = data.nrows();
    if k == 0 {
        return Err(Error::InvalidConfig("k-means needs k >= 1".into()));
    }
    if n < k {
        return Err(Error::TooFewSamples { needed: k, got: n });
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Shape("k-means input contains non-finite values".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(data, k, &mut rng);
    let mut assignments = vec![0; n];
    let mut iterations = 0;
    for _ in 0..MAX_ITERATIONS {
        iterations += 1;
        let mut dist = vec![0.0; n];
        for (i, p) in data.outer_iter().enumerate() {
            (assignments[i], dist[i]) = nearest(p, &centroids);
        }
        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let (far, d) = dist
                .iter()
                .enumerate()
                .filter(|(i, _)| counts[assignments[*i]] > 1)
                .fold((0, 0.0), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
            if d > 0.0 {
                counts[assignments[far]] -= 1;
                assignments[far] = c;
                counts[c] = 1;
                dist[far] = 0.0;
            }
        }
        let mut next = Array2::<f64>::zeros(centroids.raw_dim());
        for (i, p) in data.outer_iter().enumerate() {
            let mut row = next.row_mut(assignments[i]);
            row += &p;
        }
        for c in 0..k {
            if counts[c] > 0 {
                next.row_mut(c).mapv_inplace(|v| v / counts[c] as f64);
            } else {
                next.row_mut(c).assign(&centroids.row(c));
            }
        }
        let shift = (&next - &centroids).mapv(|v| v * v).sum_axis(Axis(1)).iter().fold(0.0f64, |m, &v| m.max(v)).sqrt();
        centroids = next;
        if shift <= TOLERANCE {
            break;
        }
    }
    Ok(KMeans { assignments, centroids, iterations })
}
