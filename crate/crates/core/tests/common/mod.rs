//! Finite-difference helpers shared by the gradient and acceptance suites.
#![allow(dead_code)]

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use gaussclust::losses::{
    attention_loss, attention_loss_grad, entropy_loss, entropy_loss_grad, separability_loss, separability_loss_grad,
    transformation_loss, transformation_loss_grad,
};
use gaussclust::model::attention::{attention_map_jacobian, gaussian_attention_map, AttentionParams};

pub const FD_STEP: f64 = 1e-6;
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Central differences of `f` at `x`.
pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + FD_STEP;
            let up = f(&probe);
            probe[i] = x[i] - FD_STEP;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `max |a - n| / max(max |a|, max |n|)`, floored to avoid dividing by zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(1e-8, f64::max);
    diff / scale
}

fn positive_vec(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    (0..k).map(|_| rng.random_range(0.05..1.0)).collect()
}

pub fn transformation_error(rng: &mut ChaCha8Rng) -> f64 {
    let k = rng.random_range(2..8);
    let (x, t) = (positive_vec(rng, k), positive_vec(rng, k));
    let numeric = numeric_grad(|x| transformation_loss(x, &t).unwrap(), &x);
    relative_error(&transformation_loss_grad(&t), &numeric)
}

pub fn separability_error(rng: &mut ChaCha8Rng) -> f64 {
    let k = rng.random_range(2..8);
    // keep the cosine away from the clamp corners
    let (li, lj) = loop {
        let li = positive_vec(rng, k);
        let lj = positive_vec(rng, k);
        let d = gaussclust::losses::cosine(&li, &lj).unwrap();
        if (0.05..0.95).contains(&d) {
            break (li, lj);
        }
    };
    let r = rng.random_bool(0.5);
    let (_, gi, gj) = separability_loss_grad(r, &li, &lj).unwrap();
    let x: Vec<f64> = li.iter().chain(&lj).copied().collect();
    let numeric = numeric_grad(|x| separability_loss(r, &x[..k], &x[k..]).unwrap(), &x);
    let analytic: Vec<f64> = gi.into_iter().chain(gj).collect();
    relative_error(&analytic, &numeric)
}

pub fn entropy_error(rng: &mut ChaCha8Rng) -> f64 {
    let (m, k) = (rng.random_range(1..10), rng.random_range(2..8));
    let x: Vec<f64> = (0..m * k).map(|_| rng.random_range(0.05..1.0)).collect();
    let as_matrix = |x: &[f64]| Array2::from_shape_vec((m, k), x.to_vec()).unwrap();
    let (_, g) = entropy_loss_grad(as_matrix(&x).view()).unwrap();
    let numeric = numeric_grad(|x| entropy_loss(as_matrix(x).view()).unwrap(), &x);
    relative_error(g.as_slice().unwrap(), &numeric)
}

pub fn attention_loss_error(rng: &mut ChaCha8Rng) -> f64 {
    let k = rng.random_range(2..8);
    let a: Vec<f64> = (0..k).map(|_| rng.random_range(0.02..0.98)).collect();
    let t: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
    let (_, g) = attention_loss_grad(&a, &t).unwrap();
    let numeric = numeric_grad(|a| attention_loss(a, &t).unwrap(), &a);
    relative_error(&g, &numeric)
}

/// Checks the Jacobian through a random linear read-out of the map.
pub fn attention_map_error(rng: &mut ChaCha8Rng) -> f64 {
    let grid = (rng.random_range(2..12), rng.random_range(2..12));
    let alpha = rng.random_range(0.5..2.0);
    let p = AttentionParams::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.05..1.0));
    let w = Array2::from_shape_fn(grid, |_| rng.random_range(-1.0..1.0));
    let readout = |x: &[f64]| {
        let map = gaussian_attention_map(AttentionParams::new(x[0], x[1], x[2]), grid, alpha).unwrap();
        (&map.values * &w).sum()
    };
    let j = attention_map_jacobian(p, grid, alpha).unwrap();
    let analytic = [(&j.d_mu_x * &w).sum(), (&j.d_mu_y * &w).sum(), (&j.d_delta * &w).sum()];
    let numeric = numeric_grad(readout, &[p.mu_x, p.mu_y, p.delta]);
    relative_error(&analytic, &numeric)
}

/// Worst relative error of `check` over `trials` draws.
pub fn worst(trials: usize, rng: &mut ChaCha8Rng, check: fn(&mut ChaCha8Rng) -> f64) -> f64 {
    (0..trials).map(|_| check(rng)).fold(0.0, f64::max)
}

pub const GRADIENT_CHECKS: [(&str, fn(&mut ChaCha8Rng) -> f64); 5] = [
    ("transformation", transformation_error),
    ("separability", separability_error),
    ("entropy", entropy_error),
    ("attention loss", attention_loss_error),
    ("attention map", attention_map_error),
];
