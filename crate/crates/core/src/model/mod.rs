//! The clustering network: an image feature module (VGG-style conv stack), a
//! label feature module (1x1 conv, global pooling, FC stack, softmax) and a
//! Gaussian attention module that re-weights the same conv features.

pub mod attention;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, FeatureStack, Linear, Mlp, Param, Real};
pub use attention::{gaussian_attention_map, AttentionMap, AttentionParams, DELTA_FLOOR};

/// One entry of the image feature module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum BlockSpec {
    /// `kernel x kernel` conv, batch norm, ReLU.
    Conv { kernel: usize, stride: usize, padding: usize, channels: usize },
    /// 1x1 conv to `k` channels, batch norm, ReLU.
    ClusterConv,
    MaxPool { kernel: usize, stride: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `(height, width)` of network inputs.
    pub input_size: [usize; 2],
    pub in_channels: usize,
    pub cluster_count: usize,
    pub blocks: Vec<BlockSpec>,
    /// Must equal the spatial size of the conv features.
    pub attention_map_size: [usize; 2],
    /// Kernel temperature `alpha`.
    pub kernel_temperature: f64,
}

fn conv(channels: usize, kernel: usize, padding: usize) -> BlockSpec {
    BlockSpec::Conv { kernel, stride: 1, padding, channels }
}

const POOL: BlockSpec = BlockSpec::MaxPool { kernel: 2, stride: 2 };

/// Largest number of activation values batch-norm recalibration keeps in
/// memory between layers.
const RECALIBRATION_CACHE_LIMIT: usize = 1 << 25;

impl ModelConfig {
    /// 96x96 grayscale stack used for STL10 and ImageNet-10.
    pub fn stl10(k: usize) -> Self {
        let mut blocks = vec![conv(64, 3, 0), conv(64, 3, 0), conv(64, 3, 0), POOL];
        blocks.extend([conv(128, 3, 0), conv(128, 3, 0), conv(128, 3, 0), POOL]);
        blocks.extend([conv(256, 3, 0), conv(256, 3, 0), conv(256, 3, 0), POOL]);
        blocks.push(BlockSpec::ClusterConv);
        Self {
            input_size: [96, 96],
            in_channels: 1,
            cluster_count: k,
            blocks,
            attention_map_size: [6, 6],
            kernel_temperature: 0.05,
        }
    }

    /// 32x32 stack used for the Cifar variants.
    pub fn cifar(k: usize) -> Self {
        let mut blocks = vec![conv(64, 3, 1), conv(64, 3, 1), conv(64, 3, 1), POOL];
        blocks.extend([conv(128, 3, 0), conv(128, 3, 0), conv(128, 3, 0), POOL]);
        blocks.push(BlockSpec::ClusterConv);
        Self {
            input_size: [32, 32],
            in_channels: 1,
            cluster_count: k,
            blocks,
            attention_map_size: [5, 5],
            kernel_temperature: 0.05,
        }
    }

    /// Desk-scale stack: three padded conv blocks, each followed by 2x2 pooling.
    pub fn small(size: usize, in_channels: usize, k: usize) -> Self {
        let blocks = vec![
            conv(16, 3, 1),
            POOL,
            conv(32, 3, 1),
            POOL,
            conv(32, 3, 1),
            POOL,
            BlockSpec::ClusterConv,
        ];
        let map = size / 8;
        Self {
            input_size: [size, size],
            in_channels,
            cluster_count: k,
            blocks,
            attention_map_size: [map, map],
            kernel_temperature: 0.05,
        }
    }

    /// Channels and spatial size after the image feature module.
    pub fn feature_geometry(&self) -> Result<(usize, usize, usize)> {
        let (mut c, mut h, mut w) = (self.in_channels, self.input_size[0], self.input_size[1]);
        for (i, block) in self.blocks.iter().enumerate() {
            let (kernel, stride, padding, out) = match *block {
                BlockSpec::Conv { kernel, stride, padding, channels } => (kernel, stride, padding, channels),
                BlockSpec::ClusterConv => (1, 1, 0, self.cluster_count),
                BlockSpec::MaxPool { kernel, stride } => (kernel, stride, 0, c),
            };
            if kernel == 0 || out == 0 {
                return Err(Error::InvalidConfig(format!("block {i} has zero kernel or channels")));
            }
            h = nn::window_output(h, kernel, stride, padding)
                .ok_or_else(|| Error::InvalidConfig(format!("block {i} shrinks the feature map to nothing")))?;
            w = nn::window_output(w, kernel, stride, padding)
                .ok_or_else(|| Error::InvalidConfig(format!("block {i} shrinks the feature map to nothing")))?;
            c = out;
        }
        Ok((c, h, w))
    }

    pub fn validate(&self) -> Result<()> {
        if self.cluster_count < 2 {
            return Err(Error::InvalidConfig(format!("cluster_count must be >= 2, got {}", self.cluster_count)));
        }
        if self.input_size.iter().any(|&s| s < 8) {
            return Err(Error::InvalidConfig(format!("input size {:?} below 8 px", self.input_size)));
        }
        if !matches!(self.in_channels, 1 | 3) {
            return Err(Error::InvalidConfig(format!("in_channels must be 1 or 3, got {}", self.in_channels)));
        }
        if !(self.kernel_temperature > 0.0) {
            return Err(Error::InvalidConfig("kernel_temperature must be positive".into()));
        }
        let (_, h, w) = self.feature_geometry()?;
        if [h, w] != self.attention_map_size {
            return Err(Error::InvalidConfig(format!(
                "attention_map_size {:?} does not match conv output {h}x{w}",
                self.attention_map_size
            )));
        }
        Ok(())
    }
}

/// A length-k probability vector.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelFeature(Vec<f64>);

impl LabelFeature {
    pub const SUM_TOLERANCE: f64 = 1e-5;

    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput);
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidConfig(format!("label feature entries must lie in [0, 1]: {values:?}")));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::InvalidConfig(format!("label feature sums to {sum}")));
        }
        Ok(Self(values))
    }

    pub fn one_hot(k: usize, h: usize) -> Self {
        let mut v = vec![0.0; k];
        v[h] = 1.0;
        Self(v)
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Deref for LabelFeature {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Everything the network emits for one sample.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub label_feature: LabelFeature,
    pub attention_label_feature: LabelFeature,
    pub attention_params: AttentionParams,
    pub attention_map: AttentionMap,
}

/// Batched network outputs.
#[derive(Clone, Debug)]
pub struct BatchOutput<F> {
    /// `(n, k)` label features.
    pub label: Array2<F>,
    /// `(n, k)` attention label features.
    pub attention_label: Array2<F>,
    /// `(n, 3)` rows of `[mu_x, mu_y, delta]`.
    pub params: Array2<F>,
    /// `(n, H, W)` attention maps.
    pub maps: Array3<F>,
}

impl<F: Real> BatchOutput<F> {
    pub fn len(&self) -> usize {
        self.label.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.label.nrows() == 0
    }

    pub fn to_outputs(&self) -> Vec<ModelOutput> {
        let row = |m: &Array2<F>, i: usize| m.row(i).iter().map(|v| v.as_f64()).collect::<Vec<_>>();
        (0..self.len())
            .map(|i| ModelOutput {
                label_feature: LabelFeature(row(&self.label, i)),
                attention_label_feature: LabelFeature(row(&self.attention_label, i)),
                attention_params: AttentionParams::new(
                    self.params[[i, 0]].as_f64(),
                    self.params[[i, 1]].as_f64(),
                    self.params[[i, 2]].as_f64(),
                ),
                attention_map: AttentionMap {
                    values: self.maps.index_axis(Axis(0), i).mapv(|v| v.as_f64()),
                },
            })
            .collect()
    }
}

struct TrainCache<F> {
    features: Array4<F>,
    raw: Array2<F>,
    params: Array2<F>,
    maps: Array3<F>,
    label: Array2<F>,
    attention_label: Array2<F>,
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn softplus<F: Real>(x: F) -> F {
    if x > F::of(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// The network, generic over its element type (f32 for training, f64 for
/// gradient checks).
pub struct Network<F: Real> {
    config: ModelConfig,
    backbone: FeatureStack<F>,
    label_conv: FeatureStack<F>,
    label_head: Mlp<F>,
    attention_head: Linear<F>,
    attention_label_head: Mlp<F>,
    cache: Option<TrainCache<F>>,
}

/// The network used for training and inference.
pub type Model = Network<f32>;

impl<F: Real> Clone for Network<F> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            backbone: self.backbone.clone(),
            label_conv: self.label_conv.clone(),
            label_head: self.label_head.clone(),
            attention_head: self.attention_head.clone(),
            attention_label_head: self.attention_label_head.clone(),
            cache: None,
        }
    }
}

impl<F: Real> Network<F> {
    /// Builds a randomly initialised network; deterministic in `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.cluster_count;
        let mut backbone = FeatureStack::default();
        let mut label_conv = FeatureStack::default();
        let mut channels = config.in_channels;
        for block in &config.blocks {
            match *block {
                BlockSpec::Conv { kernel, stride, padding, channels: out } => {
                    backbone.push_conv_block(channels, out, kernel, stride, padding, &mut rng);
                    channels = out;
                }
                BlockSpec::ClusterConv => {
                    backbone.push_conv_block(channels, k, 1, 1, 0, &mut rng);
                    channels = k;
                }
                BlockSpec::MaxPool { kernel, stride } => backbone.push_pool(kernel, stride),
            }
        }
        label_conv.push_conv_block(channels, k, 1, 1, 0, &mut rng);
        let [h, w] = config.attention_map_size;
        let label_head = Mlp::new(&[k, k, k, k], &mut rng);
        let attention_head = Linear::new(h * w, 3, &mut rng);
        let attention_label_head = Mlp::new(&[k, k, k, k], &mut rng);
        Ok(Self {
            config,
            backbone,
            label_conv,
            label_head,
            attention_head,
            attention_label_head,
            cache: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_input(&self, x: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.config.in_channels || [h, w] != self.config.input_size {
            return Err(Error::Shape(format!(
                "expected (N, {}, {}, {}), got {:?}",
                self.config.in_channels,
                self.config.input_size[0],
                self.config.input_size[1],
                x.shape()
            )));
        }
        if x.shape()[0] == 0 {
            return Err(Error::EmptyInput);
        }
        Ok(())
    }

    fn kernel_params(&self, raw: &Array2<F>) -> Array2<F> {
        let floor = F::of(DELTA_FLOOR);
        let mut out = Array2::zeros(raw.raw_dim());
        for (r, mut o) in raw.rows().into_iter().zip(out.rows_mut()) {
            o[0] = sigmoid(r[0]);
            o[1] = sigmoid(r[1]);
            o[2] = softplus(r[2]) + floor;
        }
        out
    }

    fn maps(&self, params: &Array2<F>) -> Array3<F> {
        let [h, w] = self.config.attention_map_size;
        let alpha = F::of(self.config.kernel_temperature);
        let n = params.nrows();
        let mut maps = Array3::zeros((n, h, w));
        for (i, p) in params.rows().into_iter().enumerate() {
            let values = attention::kernel_values(p[0], p[1], p[2], h, w, alpha);
            maps.index_axis_mut(Axis(0), i)
                .iter_mut()
                .zip(values)
                .for_each(|(d, v)| *d = v);
        }
        maps
    }

    fn channel_mean(features: &Array4<F>) -> Array2<F> {
        let (n, _, h, w) = features.dim();
        features
            .mean_axis(Axis(1))
            .expect("channels")
            .into_shape_with_order((n, h * w))
            .expect("flatten")
    }

    fn weight_features(features: &Array4<F>, maps: &Array3<F>) -> Array4<F> {
        let mut out = features.clone();
        for (mut sample, map) in out.outer_iter_mut().zip(maps.outer_iter()) {
            for mut plane in sample.outer_iter_mut() {
                plane *= &map;
            }
        }
        out
    }

    fn features_eval(&self, x: &Array4<F>) -> Array4<F> {
        self.label_conv.forward_eval(&self.backbone.forward_eval(x))
    }

    /// Evaluation-mode forward pass through both heads.
    pub fn forward_eval(&self, x: &Array4<F>) -> Result<BatchOutput<F>> {
        self.check_input(x)?;
        let features = self.features_eval(x);
        let label = nn::softmax_rows(&self.label_head.forward_eval(&nn::global_avg_pool(&features)));
        let raw = self.attention_head.forward_eval(&Self::channel_mean(&features));
        let params = self.kernel_params(&raw);
        let maps = self.maps(&params);
        let weighted = Self::weight_features(&features, &maps);
        let attention_label =
            nn::softmax_rows(&self.attention_label_head.forward_eval(&nn::global_avg_pool(&weighted)));
        Ok(BatchOutput { label, attention_label, params, maps })
    }

    /// Evaluation-mode label features only; skips the attention module.
    pub fn label_features_eval(&self, x: &Array4<F>) -> Result<Array2<F>> {
        self.check_input(x)?;
        let features = self.features_eval(x);
        Ok(nn::softmax_rows(&self.label_head.forward_eval(&nn::global_avg_pool(&features))))
    }

    /// Training-mode forward pass; batch statistics are used and updated, and
    /// activations are kept for [`Network::backward`].
    pub fn forward_train(&mut self, x: &Array4<F>) -> Result<BatchOutput<F>> {
        self.check_input(x)?;
        let backbone = self.backbone.forward_train(x);
        let features = self.label_conv.forward_train(&backbone);
        let label = nn::softmax_rows(&self.label_head.forward_train(&nn::global_avg_pool(&features)));
        let raw = self.attention_head.forward_train(&Self::channel_mean(&features));
        let params = self.kernel_params(&raw);
        let maps = self.maps(&params);
        let weighted = Self::weight_features(&features, &maps);
        let attention_label =
            nn::softmax_rows(&self.attention_label_head.forward_train(&nn::global_avg_pool(&weighted)));
        self.cache = Some(TrainCache {
            features,
            raw,
            params: params.clone(),
            maps: maps.clone(),
            label: label.clone(),
            attention_label: attention_label.clone(),
        });
        Ok(BatchOutput { label, attention_label, params, maps })
    }

    /// Accumulates parameter gradients given loss gradients on both label
    /// features of the last training forward pass.
    pub fn backward(&mut self, d_label: &Array2<F>, d_attention_label: &Array2<F>) -> Result<()> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Shape("backward called without a training forward pass".into()))?;
        if d_label.dim() != cache.label.dim() || d_attention_label.dim() != cache.attention_label.dim() {
            return Err(Error::Shape("loss gradient shape does not match outputs".into()));
        }
        let (n, c, h, w) = cache.features.dim();
        let alpha = F::of(self.config.kernel_temperature);

        let dz = nn::softmax_backward(&cache.label, d_label);
        let mut d_features = nn::global_avg_pool_backward(&self.label_head.backward(&dz), h, w);

        let dza = nn::softmax_backward(&cache.attention_label, d_attention_label);
        let d_weighted = nn::global_avg_pool_backward(&self.attention_label_head.backward(&dza), h, w);

        let mut d_raw = Array2::zeros((n, 3));
        for i in 0..n {
            let map = cache.maps.index_axis(Axis(0), i);
            let feat = cache.features.index_axis(Axis(0), i);
            let dw = d_weighted.index_axis(Axis(0), i);
            let mut d_map = Array2::<F>::zeros((h, w));
            for ch in 0..c {
                let dwc = dw.index_axis(Axis(0), ch);
                d_map = d_map + &(&dwc * &feat.index_axis(Axis(0), ch));
                let mut dfc = d_features.slice_mut(ndarray::s![i, ch, .., ..]);
                dfc += &(&dwc * &map);
            }
            let map_s = map.as_standard_layout();
            let d_map_s = d_map.as_standard_layout();
            let p = cache.params.row(i);
            let (gx, gy, gd) = attention::kernel_backward(
                map_s.as_slice().expect("contiguous"),
                d_map_s.as_slice().expect("contiguous"),
                p[0],
                p[1],
                p[2],
                h,
                w,
                alpha,
            );
            let r = cache.raw.row(i);
            let (sx, sy, sd) = (sigmoid(r[0]), sigmoid(r[1]), sigmoid(r[2]));
            d_raw[[i, 0]] = gx * sx * (F::one() - sx);
            d_raw[[i, 1]] = gy * sy * (F::one() - sy);
            d_raw[[i, 2]] = gd * sd;
        }
        let d_mean = self.attention_head.backward(&d_raw);
        let inv_c = F::one() / F::of(c as f64);
        for i in 0..n {
            let dm = d_mean.row(i).to_owned().into_shape_with_order((h, w)).expect("map");
            for ch in 0..c {
                let mut dfc = d_features.slice_mut(ndarray::s![i, ch, .., ..]);
                dfc += &(&dm * inv_c);
            }
        }
        let d_backbone = self.label_conv.backward(&d_features, true).expect("input grad");
        self.backbone.backward(&d_backbone, false);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Trainable parameters in a fixed order.
    pub fn params(&self) -> Vec<&Param<F>> {
        let mut out = self.backbone.params();
        out.extend(self.label_conv.params());
        out.extend(self.label_head.params());
        out.push(&self.attention_head.weight);
        out.push(&self.attention_head.bias);
        out.extend(self.attention_label_head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut out = self.backbone.params_mut();
        out.extend(self.label_conv.params_mut());
        out.extend(self.label_head.params_mut());
        out.push(&mut self.attention_head.weight);
        out.push(&mut self.attention_head.bias);
        out.extend(self.attention_label_head.params_mut());
        out
    }

    /// Batch-norm running statistics in a fixed order.
    pub fn buffers(&self) -> Vec<&ndarray::Array1<F>> {
        let mut out = self.backbone.buffers();
        out.extend(self.label_conv.buffers());
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut ndarray::Array1<F>> {
        let mut out = self.backbone.buffers_mut();
        out.extend(self.label_conv.buffers_mut());
        out
    }

    fn feature_layers(&self) -> impl Iterator<Item = &nn::FeatureLayer<F>> {
        self.backbone.layers.iter().chain(&self.label_conv.layers)
    }

    /// Number of batch-norm layers on the conv feature path.
    pub fn batch_norm_count(&self) -> usize {
        self.feature_layers().filter(|l| matches!(l, nn::FeatureLayer::Norm(_))).count()
    }

    /// Position of the `index`-th batch-norm layer in the feature path.
    fn batch_norm_position(&self, index: usize) -> usize {
        self.feature_layers()
            .enumerate()
            .filter(|(_, l)| matches!(l, nn::FeatureLayer::Norm(_)))
            .nth(index)
            .map(|(pos, _)| pos)
            .expect("batch-norm index in range")
    }

    /// Runs evaluation-mode layers `from..to` of the feature path.
    fn run_layers(&self, x: &Array4<F>, from: usize, to: usize) -> Array4<F> {
        let mut cur = x.clone();
        for layer in self.feature_layers().skip(from).take(to - from) {
            cur = layer.forward_eval(&cur);
        }
        cur
    }

    fn batch_norm_mut(&mut self, index: usize) -> &mut nn::BatchNorm2d<F> {
        self.backbone
            .layers
            .iter_mut()
            .chain(self.label_conv.layers.iter_mut())
            .filter_map(|l| match l {
                nn::FeatureLayer::Norm(bn) => Some(bn),
                _ => None,
            })
            .nth(index)
            .expect("batch-norm index in range")
    }

    /// Replaces every batch-norm layer's running statistics with the exact
    /// population mean and biased variance over a set of inputs.
    ///
    /// Layers are processed in order, each seeing activations normalised by
    /// the already re-estimated statistics of the layers before it, so the
    /// result equals training-mode normalisation over the whole set and does
    /// not depend on how `visit` splits it into batches. `visit` must call its
    /// argument once per input batch.
    pub fn recalibrate_batch_norm(
        &mut self,
        visit: impl Fn(&mut dyn FnMut(&Array4<F>) -> Result<()>) -> Result<()>,
    ) -> Result<()> {
        // per-batch activations kept between layers while they stay small
        let mut cache: Vec<(usize, Array4<F>)> = Vec::new();
        for index in 0..self.batch_norm_count() {
            let target = self.batch_norm_position(index);
            let mut sum: Vec<f64> = Vec::new();
            let mut sum_sq: Vec<f64> = Vec::new();
            let mut count = 0usize;
            let mut next_cache = Vec::new();
            let mut cached_len = 0usize;
            let mut caching = true;
            let mut batch_no = 0usize;
            visit(&mut |x: &Array4<F>| {
                let a = match cache.get(batch_no) {
                    Some((pos, act)) => self.run_layers(act, *pos, target),
                    None => self.run_layers(x, 0, target),
                };
                batch_no += 1;
                let c = a.shape()[1];
                if sum.is_empty() {
                    sum = vec![0.0; c];
                    sum_sq = vec![0.0; c];
                }
                for (ch, plane) in a.axis_iter(Axis(1)).enumerate() {
                    for &v in plane.iter() {
                        let v = v.as_f64();
                        sum[ch] += v;
                        sum_sq[ch] += v * v;
                    }
                }
                count += a.len() / c;
                if caching {
                    cached_len += a.len();
                    if cached_len > RECALIBRATION_CACHE_LIMIT {
                        caching = false;
                        next_cache.clear();
                    } else {
                        next_cache.push((target, a));
                    }
                }
                Ok(())
            })?;
            if count == 0 {
                return Err(Error::EmptyInput);
            }
            if caching {
                cache = next_cache;
            }
            let n = count as f64;
            let bn = self.batch_norm_mut(index);
            for ch in 0..sum.len() {
                let mean = sum[ch] / n;
                bn.running_mean[ch] = F::of(mean);
                bn.running_var[ch] = F::of((sum_sq[ch] / n - mean * mean).max(0.0));
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows<F: Real>(features: &Array2<F>) -> Vec<usize> {
    features
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Cluster ids `argmax_h l_ih` for a batch, in evaluation mode.
pub fn inference_assign<F: Real>(model: &Network<F>, batch: &Array4<F>) -> Result<Vec<usize>> {
    Ok(argmax_rows(&model.label_features_eval(batch)?))
}
