//! Gaussian-kernel attention maps.
//!
//! `A(u) = exp(-(1/alpha) * (u - mu)^T (delta I)^-1 (u - mu))` over a grid whose
//! coordinates are normalised to `[0, 1]`. Rows index the first coordinate.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Real;

/// Smallest kernel spread the parameter head can emit.
pub const DELTA_FLOOR: f64 = 1e-3;

/// Centre and isotropic spread of an attention kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub mu_x: f64,
    pub mu_y: f64,
    pub delta: f64,
}

impl AttentionParams {
    pub fn new(mu_x: f64, mu_y: f64, delta: f64) -> Self {
        Self { mu_x, mu_y, delta }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::InvalidAttention(format!("delta must be positive, got {}", self.delta)));
        }
        if !(0.0..=1.0).contains(&self.mu_x) || !(0.0..=1.0).contains(&self.mu_y) {
            return Err(Error::InvalidAttention(format!(
                "centre ({}, {}) outside the unit square",
                self.mu_x, self.mu_y
            )));
        }
        Ok(())
    }
}

/// An `H x W` attention map with values in `(0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub values: Array2<f64>,
}

/// Partial derivatives of every map cell with respect to the kernel parameters.
#[derive(Clone, Debug)]
pub struct AttentionJacobian {
    pub d_mu_x: Array2<f64>,
    pub d_mu_y: Array2<f64>,
    pub d_delta: Array2<f64>,
}

/// Normalised grid coordinate of index `i` along an axis of length `n`.
pub fn grid_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.5
    } else {
        i as f64 / (n - 1) as f64
    }
}

pub(crate) fn kernel_values<F: Real>(mu_x: F, mu_y: F, delta: F, h: usize, w: usize, alpha: F) -> Vec<F> {
    let scale = F::one() / (alpha * delta);
    let mut out = Vec::with_capacity(h * w);
    for x in 0..h {
        let dx = F::of(grid_coord(x, h)) - mu_x;
        for y in 0..w {
            let dy = F::of(grid_coord(y, w)) - mu_y;
            out.push((-(dx * dx + dy * dy) * scale).exp());
        }
    }
    out
}

/// Gradient of `sum(upstream * A)` with respect to `(mu_x, mu_y, delta)`.
pub(crate) fn kernel_backward<F: Real>(
    map: &[F],
    upstream: &[F],
    mu_x: F,
    mu_y: F,
    delta: F,
    h: usize,
    w: usize,
    alpha: F,
) -> (F, F, F) {
    let two = F::of(2.0);
    let ad = alpha * delta;
    let (mut gx, mut gy, mut gd) = (F::zero(), F::zero(), F::zero());
    for x in 0..h {
        let dx = F::of(grid_coord(x, h)) - mu_x;
        for y in 0..w {
            let dy = F::of(grid_coord(y, w)) - mu_y;
            let i = x * w + y;
            let ga = upstream[i] * map[i];
            gx += ga * two * dx / ad;
            gy += ga * two * dy / ad;
            gd += ga * (dx * dx + dy * dy) / (ad * delta);
        }
    }
    (gx, gy, gd)
}

/// Evaluates the Gaussian attention map on an `(H, W)` grid.
pub fn gaussian_attention_map(params: AttentionParams, grid: (usize, usize), alpha: f64) -> Result<AttentionMap> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidAttention(format!("alpha must be positive, got {alpha}")));
    }
    if !(params.delta > 0.0) {
        return Err(Error::InvalidAttention(format!("delta must be positive, got {}", params.delta)));
    }
    let (h, w) = grid;
    let values = kernel_values(params.mu_x, params.mu_y, params.delta, h, w, alpha);
    Ok(AttentionMap { values: Array2::from_shape_vec((h, w), values).expect("grid shape") })
}

/// Analytic Jacobian of the map with respect to its parameters.
pub fn attention_map_jacobian(params: AttentionParams, grid: (usize, usize), alpha: f64) -> Result<AttentionJacobian> {
    let map = gaussian_attention_map(params, grid, alpha)?;
    let (h, w) = grid;
    let ad = alpha * params.delta;
    let mut d_mu_x = Array2::zeros((h, w));
    let mut d_mu_y = Array2::zeros((h, w));
    let mut d_delta = Array2::zeros((h, w));
    for x in 0..h {
        let dx = grid_coord(x, h) - params.mu_x;
        for y in 0..w {
            let dy = grid_coord(y, w) - params.mu_y;
            let a = map.values[[x, y]];
            d_mu_x[[x, y]] = a * 2.0 * dx / ad;
            d_mu_y[[x, y]] = a * 2.0 * dy / ad;
            d_delta[[x, y]] = a * (dx * dx + dy * dy) / (ad * params.delta);
        }
    }
    Ok(AttentionJacobian { d_mu_x, d_mu_y, d_delta })
}
