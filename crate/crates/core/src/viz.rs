//! Planar scatter maps of label features and attention overlays.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::attention::AttentionMap;

/// Mixes unit-circle points at angles `2 pi h / k`, `h = 1..=k`, with the
/// feature entries as weights.
pub fn map_to_2d(l: &[f64]) -> (f64, f64) {
    let k = l.len() as f64;
    l.iter().enumerate().fold((0.0, 0.0), |(x, y), (i, &w)| {
        let angle = TAU * (i + 1) as f64 / k;
        (x + w * angle.sin(), y + w * angle.cos())
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterMap {
    pub k: usize,
    pub points: Vec<(f64, f64)>,
    /// Reference class of each point, used only for colouring.
    pub colors: Option<Vec<usize>>,
    pub accuracy: Option<f64>,
}

const PALETTE: [[u8; 3]; 8] = [
    [228, 26, 28],
    [55, 126, 184],
    [77, 175, 74],
    [152, 78, 163],
    [255, 127, 0],
    [166, 86, 40],
    [247, 129, 191],
    [90, 90, 90],
];

impl ScatterMap {
    pub fn from_features(features: ArrayView2<'_, f64>, colors: Option<Vec<usize>>, accuracy: Option<f64>) -> Result<Self> {
        if let Some(c) = &colors {
            if c.len() != features.nrows() {
                return Err(Error::Shape(format!("{} colours for {} points", c.len(), features.nrows())));
            }
        }
        let points = features.rows().into_iter().map(|r| map_to_2d(&r.to_vec())).collect();
        Ok(Self { k: features.ncols(), points, colors, accuracy })
    }

    /// One `x,y,color` line per point; `color` is empty without reference labels.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,color\n");
        for (i, (x, y)) in self.points.iter().enumerate() {
            let c = self.colors.as_ref().map(|c| c[i].to_string()).unwrap_or_default();
            let _ = writeln!(out, "{x},{y},{c}");
        }
        out
    }

    /// Square raster of the unit disk with the `k`-gon vertices marked.
    pub fn render(&self, size: usize) -> RgbImage {
        let size = size.max(16) as u32;
        let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
        let to_px = |x: f64, y: f64| -> (i64, i64) {
            let half = (size as f64 - 1.0) / 2.0;
            let scale = half * 0.92;
            ((half + x * scale).round() as i64, (half - y * scale).round() as i64)
        };
        let put = |img: &mut RgbImage, px: i64, py: i64, c: [u8; 3]| {
            if px >= 0 && py >= 0 && (px as u32) < size && (py as u32) < size {
                img.put_pixel(px as u32, py as u32, Rgb(c));
            }
        };
        let steps = 4 * size as usize;
        for s in 0..steps {
            let a = TAU * s as f64 / steps as f64;
            let (px, py) = to_px(a.sin(), a.cos());
            put(&mut img, px, py, [200, 200, 200]);
        }
        for h in 1..=self.k {
            let a = TAU * h as f64 / self.k as f64;
            let (px, py) = to_px(a.sin(), a.cos());
            for dx in -3..=3 {
                for dy in -3..=3 {
                    if dx == 0 || dy == 0 {
                        put(&mut img, px + dx, py + dy, [0, 0, 0]);
                    }
                }
            }
        }
        for (i, &(x, y)) in self.points.iter().enumerate() {
            let c = self.colors.as_ref().map(|c| PALETTE[c[i] % PALETTE.len()]).unwrap_or([30, 30, 30]);
            let (px, py) = to_px(x, y);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    put(&mut img, px + dx, py + dy, c);
                }
            }
        }
        img
    }

    pub fn write(&self, csv_path: &Path, png_path: &Path, size: usize) -> Result<()> {
        std::fs::write(csv_path, self.to_csv())?;
        self.render(size).save(png_path)?;
        Ok(())
    }
}

/// Bilinear resampling of a map onto an `h x w` grid with aligned corners.
pub fn upsample(map: ArrayView2<'_, f64>, h: usize, w: usize) -> Array2<f64> {
    let (mh, mw) = map.dim();
    let coord = |i: usize, n: usize, m: usize| -> (usize, usize, f64) {
        if n <= 1 || m <= 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (m - 1) as f64 / (n - 1) as f64;
        let lo = (pos.floor() as usize).min(m - 1);
        let hi = (lo + 1).min(m - 1);
        (lo, hi, pos - lo as f64)
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (y0, y1, fy) = coord(y, h, mh);
        let (x0, x1, fx) = coord(x, w, mw);
        let top = map[[y0, x0]] * (1.0 - fx) + map[[y0, x1]] * fx;
        let bottom = map[[y1, x0]] * (1.0 - fx) + map[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

fn heat(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [(1.5 * v).min(1.0), (2.0 * v - 0.5).clamp(0.0, 1.0), (0.6 - v).max(0.0)]
}

/// Blends a heat-coloured attention map over an image of shape `(c, h, w)`.
pub fn attention_overlay(image: ArrayView3<'_, f32>, map: &AttentionMap, alpha: f64) -> Result<RgbImage> {
    let (c, h, w) = image.dim();
    if c != 1 && c != 3 {
        return Err(Error::Shape(format!("{c} image channels")));
    }
    let up = upsample(map.values.view(), h, w);
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let base = |ch: usize| image[[if c == 1 { 0 } else { ch }, y, x]] as f64;
            let hc = heat(up[[y, x]]);
            let px: [u8; 3] = std::array::from_fn(|ch| {
                let v = (1.0 - alpha) * base(ch) + alpha * hc[ch];
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            });
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    Ok(img)
}

pub fn render_attention_overlay(image: ArrayView3<'_, f32>, map: &AttentionMap, path: &Path) -> Result<()> {
    attention_overlay(image, map, 0.5)?.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_keeps_corners() {
        let m = ndarray::array![[0.0, 1.0], [2.0, 3.0]];
        let u = upsample(m.view(), 5, 5);
        assert_eq!(u[[0, 0]], 0.0);
        assert_eq!(u[[0, 4]], 1.0);
        assert_eq!(u[[4, 4]], 3.0);
        assert!((u[[2, 2]] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn csv_has_one_line_per_point() {
        let f = ndarray::array![[1.0, 0.0], [0.0, 1.0]];
        let s = ScatterMap::from_features(f.view(), Some(vec![0, 1]), None).unwrap();
        assert_eq!(s.to_csv().lines().count(), 3);
        assert!(ScatterMap::from_features(f.view(), Some(vec![0]), None).is_err());
    }
}
