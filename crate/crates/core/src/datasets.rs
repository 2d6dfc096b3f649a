//! Image datasets and the stochastic transformation pipeline.
//!
//! Samples are stored compactly as 8-bit pixels and decoded to `f32` tensors
//! in `[0, 1]` only when a batch is requested. Every decoded batch is counted
//! by a [`MaterializationTracker`] so callers can bound how many decoded
//! images are alive at once.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use image::imageops::FilterType;
use ndarray::{s, Array3, Array4, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::GroundTruth;

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// Where a folder dataset lives and how to read it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub root_path: PathBuf,
    /// `(height, width)` after resizing.
    pub image_size: [usize; 2],
    pub grayscale: bool,
    pub cluster_count: usize,
    pub has_ground_truth: bool,
    /// Optional `relative_path,label` manifest; otherwise one folder per class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size.iter().any(|&s| s < 8) {
            return Err(Error::InvalidConfig(format!("image_size {:?} below 8 px", self.image_size)));
        }
        if self.cluster_count < 2 {
            return Err(Error::InvalidConfig("cluster_count must be >= 2".into()));
        }
        Ok(())
    }
}

/// Ranges of the random flip, affine and colour-jitter draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformConfig {
    pub flip_prob: f64,
    /// Rotation is drawn from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    /// Translation as a fraction of the image size.
    pub translate: f64,
    /// Scale factor range.
    pub scale: [f64; 2],
    pub shear_deg: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue shift in turns, at most 0.5.
    pub hue: f64,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            rotation_deg: 10.0,
            translate: 0.1,
            scale: [0.9, 1.1],
            shear_deg: 5.0,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
        }
    }
}

impl TransformConfig {
    /// Configuration whose every draw is the identity.
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            rotation_deg: 0.0,
            translate: 0.0,
            scale: [1.0, 1.0],
            shear_deg: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            self.rotation_deg,
            self.translate,
            self.shear_deg,
            self.brightness,
            self.contrast,
            self.saturation,
            self.hue,
            self.scale[0],
            self.scale[1],
        ];
        if ranges.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig("transform ranges must be finite and nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::InvalidConfig("flip_prob must lie in [0, 1]".into()));
        }
        if self.scale[0] > self.scale[1] || self.scale[0] == 0.0 {
            return Err(Error::InvalidConfig("scale range must be positive and ordered".into()));
        }
        if self.hue > 0.5 {
            return Err(Error::InvalidConfig("hue must be at most 0.5".into()));
        }
        Ok(())
    }
}

/// Counts decoded images that are currently alive.
#[derive(Debug, Default)]
pub struct MaterializationTracker {
    live: AtomicUsize,
    peak: AtomicUsize,
    total: AtomicUsize,
}

impl MaterializationTracker {
    fn acquire(&self, count: usize) {
        let now = self.live.fetch_add(count, Ordering::SeqCst) + count;
        self.peak.fetch_max(now, Ordering::SeqCst);
        self.total.fetch_add(count, Ordering::SeqCst);
    }

    fn release(&self, count: usize) {
        self.live.fetch_sub(count, Ordering::SeqCst);
    }

    pub fn live(&self) -> usize {
        self.live.load(Ordering::SeqCst)
    }

    /// Largest number of simultaneously alive decoded images since the last reset.
    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn total(&self) -> usize {
        self.total.load(Ordering::SeqCst)
    }

    pub fn reset_peak(&self) {
        self.peak.store(self.live(), Ordering::SeqCst);
    }
}

/// A batch of decoded images `(count, channels, height, width)` in `[0, 1]`.
#[derive(Debug)]
pub struct ImageBatch {
    samples: Array4<f32>,
    indices: Vec<usize>,
    tracker: Option<Arc<MaterializationTracker>>,
}

impl ImageBatch {
    pub fn new(samples: Array4<f32>, indices: Vec<usize>) -> Result<Self> {
        Self::tracked(samples, indices, None)
    }

    fn tracked(samples: Array4<f32>, indices: Vec<usize>, tracker: Option<Arc<MaterializationTracker>>) -> Result<Self> {
        let (n, c, _, _) = samples.dim();
        if !matches!(c, 1 | 3) {
            return Err(Error::Shape(format!("batch must have 1 or 3 channels, got {c}")));
        }
        if indices.len() != n {
            return Err(Error::Shape(format!("{} indices for {n} samples", indices.len())));
        }
        if indices.iter().collect::<HashSet<_>>().len() != n {
            return Err(Error::Shape("batch indices must be unique".into()));
        }
        if let Some(t) = &tracker {
            t.acquire(n);
        }
        Ok(Self { samples, indices, tracker })
    }

    pub fn samples(&self) -> &Array4<f32> {
        &self.samples
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.samples.shape()[1]
    }

    /// Replaces the pixel data, keeping indices and tracker registration.
    fn with_samples(mut self, samples: Array4<f32>) -> Result<Self> {
        if samples.shape()[0] != self.len() {
            return Err(Error::Shape("sample count changed".into()));
        }
        self.samples = samples;
        Ok(self)
    }
}

impl Drop for ImageBatch {
    fn drop(&mut self) {
        if let Some(t) = &self.tracker {
            t.release(self.indices.len());
        }
    }
}

/// An indexable collection of fixed-size images.
///
/// Ground-truth labels, when present, are reachable only through
/// [`Dataset::ground_truth`], which hands out the opaque metrics type.
#[derive(Debug)]
pub struct Dataset {
    pixels: Vec<u8>,
    len: usize,
    source_channels: usize,
    image_size: [usize; 2],
    grayscale: bool,
    cluster_count: usize,
    truth: Option<GroundTruth>,
    tracker: Arc<MaterializationTracker>,
}

impl Dataset {
    /// Builds a dataset from 8-bit pixels laid out `(N, C, H, W)`.
    pub fn from_pixels(
        pixels: Vec<u8>,
        source_channels: usize,
        image_size: [usize; 2],
        grayscale: bool,
        cluster_count: usize,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let per = source_channels * image_size[0] * image_size[1];
        if per == 0 || pixels.len() % per != 0 || !matches!(source_channels, 1 | 3) {
            return Err(Error::Shape("pixel buffer does not match the image geometry".into()));
        }
        let len = pixels.len() / per;
        if len == 0 {
            return Err(Error::EmptyInput);
        }
        if let Some(l) = &labels {
            if l.len() != len {
                return Err(Error::Shape(format!("{} labels for {len} images", l.len())));
            }
        }
        Ok(Self {
            pixels,
            len,
            source_channels,
            image_size,
            grayscale: grayscale || source_channels == 1,
            cluster_count,
            truth: labels.map(GroundTruth::new),
            tracker: Arc::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn image_size(&self) -> [usize; 2] {
        self.image_size
    }

    pub fn cluster_count(&self) -> usize {
        self.cluster_count
    }

    /// Channels of batches handed to the network.
    pub fn output_channels(&self) -> usize {
        if self.grayscale {
            1
        } else {
            self.source_channels
        }
    }

    pub fn source_channels(&self) -> usize {
        self.source_channels
    }

    pub fn ground_truth(&self) -> Option<&GroundTruth> {
        self.truth.as_ref()
    }

    pub fn tracker(&self) -> &MaterializationTracker {
        &self.tracker
    }

    fn check_indices(&self, indices: &[usize]) -> Result<()> {
        if indices.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len) {
            return Err(Error::Shape(format!("sample index {bad} out of range for {} samples", self.len)));
        }
        Ok(())
    }

    fn decode(&self, index: usize) -> Array3<f32> {
        let [h, w] = self.image_size;
        let per = self.source_channels * h * w;
        let raw = &self.pixels[index * per..(index + 1) * per];
        Array3::from_shape_fn((self.source_channels, h, w), |(c, y, x)| raw[(c * h + y) * w + x] as f32 / 255.0)
    }

    fn finish(&self, image: Array3<f32>) -> Array3<f32> {
        if self.grayscale && image.shape()[0] == 3 {
            to_grayscale(image.view())
        } else {
            image
        }
    }

    fn assemble(&self, images: Vec<Array3<f32>>, indices: &[usize]) -> Result<ImageBatch> {
        let [h, w] = self.image_size;
        let c = self.output_channels();
        let mut samples = Array4::zeros((images.len(), c, h, w));
        for (mut dst, img) in samples.outer_iter_mut().zip(images) {
            dst.assign(&img);
        }
        ImageBatch::tracked(samples, indices.to_vec(), Some(self.tracker.clone()))
    }

    /// Decodes the given samples without augmentation.
    pub fn batch(&self, indices: &[usize]) -> Result<ImageBatch> {
        self.check_indices(indices)?;
        let images = indices.iter().map(|&i| self.finish(self.decode(i))).collect();
        self.assemble(images, indices)
    }

    /// Decodes and augments the given samples, one seed per sample.
    ///
    /// Augmentation runs on the source channels, so colour jitter precedes
    /// the grayscale conversion.
    pub fn transformed_batch(&self, indices: &[usize], cfg: &TransformConfig, seeds: &[u64]) -> Result<ImageBatch> {
        self.check_indices(indices)?;
        if seeds.len() != indices.len() {
            return Err(Error::Shape("one transform seed per sample required".into()));
        }
        let images = indices
            .iter()
            .zip(seeds)
            .map(|(&i, &seed)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                self.finish(transform_image(self.decode(i).view(), cfg, &mut rng))
            })
            .collect();
        self.assemble(images, indices)
    }

    /// All sample indices in order.
    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len).collect()
    }
}

fn collect_images(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::result::Result<_, _>>()?;
    entries.sort_by_key(|e| e.path());
    for entry in entries {
        let path = entry.path();
        if path.is_dir() {
            collect_images(&path, out)?;
        } else if path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            .unwrap_or(false)
        {
            out.push(path);
        }
    }
    Ok(())
}

fn read_manifest(root: &Path, manifest: &Path) -> Result<(Vec<PathBuf>, Vec<usize>)> {
    let path = if manifest.is_absolute() { manifest.to_path_buf() } else { root.join(manifest) };
    if !path.exists() {
        return Err(Error::MissingPath(path));
    }
    let text = fs::read_to_string(&path)?;
    let mut files = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (rel, label) = line
            .rsplit_once(',')
            .ok_or_else(|| Error::InvalidConfig(format!("manifest line {} is not `path,label`", n + 1)))?;
        let label = label
            .trim()
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("manifest line {}: bad label {label:?}", n + 1)))?;
        files.push(root.join(rel.trim()));
        labels.push(label);
    }
    Ok((files, labels))
}

/// Reads a folder dataset into memory, resizing every image bilinearly.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let root = &spec.root_path;
    if !root.exists() {
        return Err(Error::MissingPath(root.clone()));
    }
    let (files, labels) = if let Some(manifest) = &spec.manifest {
        let (f, l) = read_manifest(root, manifest)?;
        (f, spec.has_ground_truth.then_some(l))
    } else if spec.has_ground_truth {
        let mut classes: Vec<PathBuf> = fs::read_dir(root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        classes.sort();
        let mut files = Vec::new();
        let mut labels = Vec::new();
        for (label, class_dir) in classes.iter().enumerate() {
            let mut in_class = Vec::new();
            collect_images(class_dir, &mut in_class)?;
            labels.extend(std::iter::repeat_n(label, in_class.len()));
            files.extend(in_class);
        }
        (files, Some(labels))
    } else {
        let mut files = Vec::new();
        collect_images(root, &mut files)?;
        (files, None)
    };
    if files.is_empty() {
        return Err(Error::NoSamples(root.clone()));
    }
    if let Some(l) = &labels {
        let classes = l.iter().collect::<HashSet<_>>().len();
        if classes != spec.cluster_count {
            log::warn!("dataset has {classes} classes but cluster_count is {}", spec.cluster_count);
        }
    }
    let [h, w] = spec.image_size;
    let mut pixels = Vec::with_capacity(files.len() * 3 * h * w);
    for path in &files {
        let img = image::open(path).map_err(|e| Error::Decode { path: path.clone(), message: e.to_string() })?;
        let rgb = img.resize_exact(w as u32, h as u32, FilterType::Triangle).to_rgb8();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    pixels.push(rgb.get_pixel(x as u32, y as u32).0[c]);
                }
            }
        }
    }
    Dataset::from_pixels(pixels, 3, spec.image_size, spec.grayscale, spec.cluster_count, labels)
}

/// Shapes available to [`make_synthetic_shapes`], in label order.
pub const SHAPE_NAMES: [&str; 8] = ["disk", "square", "triangle", "cross", "ring", "diamond", "star", "ell"];

fn inside_shape(shape: usize, dx: f64, dy: f64) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= 1.0,
        1 => dx.abs() <= 0.85 && dy.abs() <= 0.85,
        2 => {
            // apex up, base at dy = 0.8
            dy <= 0.8 && dy >= -0.9 && dx.abs() <= (dy + 0.9) / 1.7 * 0.95
        }
        3 => (dx.abs() <= 0.3 && dy.abs() <= 0.95) || (dy.abs() <= 0.3 && dx.abs() <= 0.95),
        4 => {
            let r2 = dx * dx + dy * dy;
            (0.55 * 0.55..=1.0).contains(&r2)
        }
        5 => dx.abs() + dy.abs() <= 1.0,
        6 => {
            let r = (dx * dx + dy * dy).sqrt();
            let theta = dy.atan2(dx) + std::f64::consts::FRAC_PI_2;
            let arm = (5.0 * theta / 2.0).cos().abs();
            r <= 0.45 + 0.55 * arm.powi(3)
        }
        7 => ((-0.8..=-0.25).contains(&dx) && dy.abs() <= 0.9) || ((0.35..=0.9).contains(&dy) && dx.abs() <= 0.8),
        _ => false,
    }
}

/// Area of a shape's footprint in the `[-1, 1]^2` template, by grid count.
fn shape_area(shape: usize) -> f64 {
    const N: usize = 256;
    let step = 2.0 / N as f64;
    let mut hits = 0usize;
    for y in 0..N {
        for x in 0..N {
            let (dx, dy) = (-1.0 + (x as f64 + 0.5) * step, -1.0 + (y as f64 + 0.5) * step);
            hits += inside_shape(shape, dx, dy) as usize;
        }
    }
    hits as f64 * step * step
}

/// Generates `k * n_per_class` grayscale images, each holding one shape at a
/// random position and scale on a noisy background. Labels are shape ids.
///
/// Shapes are scaled to a common area, so size carries no class information.
pub fn make_synthetic_shapes(k: usize, n_per_class: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    if k > SHAPE_NAMES.len() {
        return Err(Error::TooManyShapes { requested: k, available: SHAPE_NAMES.len() });
    }
    if k < 2 || n_per_class == 0 || image_size < 8 {
        return Err(Error::InvalidConfig("need k >= 2, n_per_class >= 1 and image_size >= 8".into()));
    }
    let area_scale: Vec<f64> = (0..k).map(|s| (std::f64::consts::PI / shape_area(s)).sqrt()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = k * n_per_class;
    let size = image_size as f64;
    let mut pixels = Vec::with_capacity(n * image_size * image_size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let shape = i % k;
        let radius = rng.random_range(0.22..0.3) * size * area_scale[shape];
        let lo = radius + 1.0;
        let hi = (size - radius - 1.0).max(lo + 1e-9);
        let (cx, cy) = (rng.random_range(lo..hi), rng.random_range(lo..hi));
        let ink = rng.random_range(0.85..0.95);
        let noise_level = rng.random_range(0.08..0.12);
        for y in 0..image_size {
            for x in 0..image_size {
                let mut cover = 0.0;
                for (sy, sx) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                    let dx = (x as f64 + sx - cx) / radius;
                    let dy = (y as f64 + sy - cy) / radius;
                    if inside_shape(shape, dx, dy) {
                        cover += 0.25;
                    }
                }
                let bg = rng.random::<f64>() * noise_level;
                let v = bg * (1.0 - cover) + ink * cover;
                pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        labels.push(shape);
    }
    Dataset::from_pixels(pixels, 1, [image_size, image_size], true, k, Some(labels))
}

/// ITU-R 601 luma.
pub fn to_grayscale(image: ArrayView3<'_, f32>) -> Array3<f32> {
    if image.shape()[0] == 1 {
        return image.to_owned();
    }
    let (r, g, b) = (image.index_axis(Axis(0), 0), image.index_axis(Axis(0), 1), image.index_axis(Axis(0), 2));
    let luma = &r * 0.299 + &g * 0.587 + &b * 0.114;
    luma.insert_axis(Axis(0))
}

fn bilinear(plane: ndarray::ArrayView2<'_, f32>, y: f64, x: f64) -> f32 {
    let (h, w) = plane.dim();
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = ((y - y0) as f32, (x - x0) as f32);
    let get = |yy: f64, xx: f64| -> f32 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[[yy as usize, xx as usize]]
        }
    };
    let top = get(y0, x0) * (1.0 - fx) + get(y0, x0 + 1.0) * fx;
    let bottom = get(y0 + 1.0, x0) * (1.0 - fx) + get(y0 + 1.0, x0 + 1.0) * fx;
    top * (1.0 - fy) + bottom * fy
}

fn affine(image: &Array3<f32>, angle: f64, shear: f64, scale: f64, tx: f64, ty: f64) -> Array3<f32> {
    let (c, h, w) = image.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    // forward: p' = R(angle) * Shear(shear) * scale * p + t, about the centre
    let (ca, sa) = (angle.cos(), angle.sin());
    let sh = shear.tan();
    let m = [[ca * scale, (ca * sh - sa) * scale], [sa * scale, (sa * sh + ca) * scale]];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
    let mut out = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let px = x as f64 - cx - tx;
            let py = y as f64 - cy - ty;
            let sx = inv[0][0] * px + inv[0][1] * py + cx;
            let sy = inv[1][0] * px + inv[1][1] * py + cy;
            for ch in 0..c {
                out[[ch, y, x]] = bilinear(image.index_axis(Axis(0), ch), sy, sx);
            }
        }
    }
    out
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn blend(image: &mut Array3<f32>, other: &Array3<f32>, factor: f32) {
    ndarray::Zip::from(image).and(other).for_each(|a, &b| *a = (factor * *a + (1.0 - factor) * b).clamp(0.0, 1.0));
}

fn jitter_factor<R: Rng>(range: f64, rng: &mut R) -> f64 {
    if range == 0.0 {
        1.0
    } else {
        rng.random_range((1.0 - range).max(0.0)..=1.0 + range)
    }
}

/// Applies one random flip, affine and colour-jitter draw to `(C, H, W)`.
///
/// Every draw is consumed from `rng` even when it turns out to be the
/// identity, so the random stream does not depend on the outcome.
pub fn transform_image<R: Rng>(image: ArrayView3<'_, f32>, cfg: &TransformConfig, rng: &mut R) -> Array3<f32> {
    let mut out = image.to_owned();
    let (_, h, w) = out.dim();

    let flip = rng.random::<f64>() < cfg.flip_prob;
    if flip {
        out = out.slice(s![.., .., ..;-1]).to_owned();
    }

    let sym = |r: &mut R, range: f64| if range == 0.0 { 0.0 } else { r.random_range(-range..=range) };
    let angle = sym(rng, cfg.rotation_deg).to_radians();
    let shear = sym(rng, cfg.shear_deg).to_radians();
    let scale = if cfg.scale[0] == cfg.scale[1] { cfg.scale[0] } else { rng.random_range(cfg.scale[0]..=cfg.scale[1]) };
    let tx = sym(rng, cfg.translate) * w as f64;
    let ty = sym(rng, cfg.translate) * h as f64;
    if angle != 0.0 || shear != 0.0 || scale != 1.0 || tx != 0.0 || ty != 0.0 {
        out = affine(&out, angle, shear, scale, tx, ty);
    }

    let brightness = jitter_factor(cfg.brightness, rng);
    let contrast = jitter_factor(cfg.contrast, rng);
    let saturation = jitter_factor(cfg.saturation, rng);
    let hue = sym(rng, cfg.hue);
    if brightness != 1.0 {
        let b = brightness as f32;
        out.mapv_inplace(|v| (v * b).clamp(0.0, 1.0));
    }
    if contrast != 1.0 {
        let mean = to_grayscale(out.view()).mean().unwrap_or(0.0);
        let c = contrast as f32;
        out.mapv_inplace(|v| (c * v + (1.0 - c) * mean).clamp(0.0, 1.0));
    }
    if out.shape()[0] == 3 {
        if saturation != 1.0 {
            let gray = to_grayscale(out.view());
            let gray3 = ndarray::concatenate(Axis(0), &[gray.view(), gray.view(), gray.view()]).expect("rgb");
            blend(&mut out, &gray3, saturation as f32);
        }
        if hue != 0.0 {
            for y in 0..h {
                for x in 0..w {
                    let (hh, ss, vv) = rgb_to_hsv(out[[0, y, x]], out[[1, y, x]], out[[2, y, x]]);
                    let (r, g, b) = hsv_to_rgb(hh + hue as f32, ss, vv);
                    out[[0, y, x]] = r.clamp(0.0, 1.0);
                    out[[1, y, x]] = g.clamp(0.0, 1.0);
                    out[[2, y, x]] = b.clamp(0.0, 1.0);
                }
            }
        }
    }
    out
}

/// Seed of the `position`-th sample of a transform draw.
pub fn sample_seed(seed: u64, position: u64) -> u64 {
    // splitmix64 finaliser over the pair
    let mut z = seed ^ position.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independently transforms every sample of `batch`.
pub fn random_transform(batch: ImageBatch, cfg: &TransformConfig, seed: u64) -> Result<ImageBatch> {
    if batch.is_empty() {
        return Err(Error::EmptyInput);
    }
    cfg.validate()?;
    let mut out = Array4::zeros(batch.samples().raw_dim());
    for (pos, (src, mut dst)) in batch.samples().outer_iter().zip(out.outer_iter_mut()).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, pos as u64));
        dst.assign(&transform_image(src, cfg, &mut rng));
    }
    batch.with_samples(out)
}
