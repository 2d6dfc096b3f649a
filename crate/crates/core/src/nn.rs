//! Minimal layers with hand-written backward passes.
//!
//! Every layer keeps the activations it needs from its last training-mode
//! forward call. `forward_eval` takes `&self` and caches nothing, so
//! inference can run on a shared model.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, IxDyn};
use rand::Rng;

/// Floating-point element type of a network.
pub trait Real: ndarray::NdFloat + num_traits::FromPrimitive + Default {
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<F> {
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
}

impl<F: Real> Param<F> {
    pub fn new(value: ArrayD<F>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data: Vec<F> = (0..n)
            .map(|_| F::of(rng.random_range(-bound..=bound)))
            .collect();
        Self::new(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape"))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

fn mat<F: Real>(p: &ArrayD<F>) -> ndarray::ArrayView2<'_, F> {
    p.view().into_dimensionality().expect("2-d parameter")
}

fn vec1<F: Real>(p: &ArrayD<F>) -> ndarray::ArrayView1<'_, F> {
    p.view().into_dimensionality().expect("1-d parameter")
}

/// Output spatial size of a convolution or pooling window.
pub fn window_output(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

/// Unfolds `x` into a `(C*kh*kw, N*out_h*out_w)` matrix.
fn im2col<F: Real>(x: &Array4<F>, g: &Geometry) -> Array2<F> {
    let n = x.shape()[0];
    let spatial = g.out_h * g.out_w;
    let rows = g.channels * g.kh * g.kw;
    let cols_total = n * spatial;
    let mut out = vec![F::zero(); rows * cols_total];
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("contiguous");
    let plane = g.height * g.width;
    for b in 0..n {
        for c in 0..g.channels {
            let src = &xs[(b * g.channels + c) * plane..(b * g.channels + c + 1) * plane];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = (c * g.kh + ky) * g.kw + kx;
                    let dst = &mut out[row * cols_total + b * spatial..row * cols_total + (b + 1) * spatial];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let base = iy as usize * g.width;
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.width {
                                *v = src[base + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((rows, cols_total), out).expect("im2col shape")
}

/// Adjoint of [`im2col`].
fn col2im<F: Real>(cols: &Array2<F>, n: usize, g: &Geometry) -> Array4<F> {
    let spatial = g.out_h * g.out_w;
    let cols_total = n * spatial;
    let plane = g.height * g.width;
    let mut out = vec![F::zero(); n * g.channels * plane];
    let cs = cols.as_standard_layout();
    let cs = cs.as_slice().expect("contiguous");
    for b in 0..n {
        for c in 0..g.channels {
            let dst = &mut out[(b * g.channels + c) * plane..(b * g.channels + c + 1) * plane];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = (c * g.kh + ky) * g.kw + kx;
                    let src = &cs[row * cols_total + b * spatial..row * cols_total + (b + 1) * spatial];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let base = iy as usize * g.width;
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.width {
                                dst[base + ix as usize] += src[oy * g.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Array4::from_shape_vec((n, g.channels, g.height, g.width), out).expect("col2im shape")
}

/// Bias-free 2-d convolution; always followed by batch norm in this crate.
#[derive(Clone, Debug)]
pub struct Conv2d<F> {
    pub weight: Param<F>,
    in_channels: usize,
    out_channels: usize,
    kernel: (usize, usize),
    stride: usize,
    padding: usize,
    cache: Option<(Array2<F>, Geometry, usize)>,
}

impl<F: Real> Conv2d<F> {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel.0 * kernel.1;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Param::uniform(&[out_channels, fan_in], bound, rng),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn geometry(&self, x: &Array4<F>) -> Geometry {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        assert_eq!(x.shape()[1], self.in_channels, "conv input channels");
        Geometry {
            channels: self.in_channels,
            height: h,
            width: w,
            kh: self.kernel.0,
            kw: self.kernel.1,
            stride: self.stride,
            pad: self.padding,
            out_h: window_output(h, self.kernel.0, self.stride, self.padding).expect("conv window"),
            out_w: window_output(w, self.kernel.1, self.stride, self.padding).expect("conv window"),
        }
    }

    fn apply(&self, cols: &Array2<F>, n: usize, g: &Geometry) -> Array4<F> {
        let out = mat(&self.weight.value).dot(cols);
        let out = out
            .into_shape_with_order((self.out_channels, n, g.out_h, g.out_w))
            .expect("conv output");
        out.permuted_axes([1, 0, 2, 3]).as_standard_layout().to_owned()
    }

    pub fn forward_eval(&self, x: &Array4<F>) -> Array4<F> {
        let g = self.geometry(x);
        let cols = im2col(x, &g);
        self.apply(&cols, x.shape()[0], &g)
    }

    pub fn forward_train(&mut self, x: &Array4<F>) -> Array4<F> {
        let g = self.geometry(x);
        let n = x.shape()[0];
        let cols = im2col(x, &g);
        let y = self.apply(&cols, n, &g);
        self.cache = Some((cols, g, n));
        y
    }

    /// Accumulates the weight gradient; returns the input gradient when asked.
    pub fn backward(&mut self, dy: &Array4<F>, need_input_grad: bool) -> Option<Array4<F>> {
        let (cols, g, n) = self.cache.take().expect("conv backward without forward");
        let dy2 = dy
            .view()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((self.out_channels, n * g.out_h * g.out_w))
            .expect("conv grad");
        let dw = dy2.dot(&cols.t());
        let mut grad = self.weight.grad.view_mut().into_dimensionality::<ndarray::Ix2>().expect("2-d");
        grad += &dw;
        if need_input_grad {
            let dcols = mat(&self.weight.value).t().dot(&dy2);
            Some(col2im(&dcols, n, &g))
        } else {
            None
        }
    }
}

/// Per-channel batch normalisation over `(N, H, W)`.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    momentum: F,
    eps: F,
    cache: Option<(Array4<F>, Array1<F>)>,
}

impl<F: Real> BatchNorm2d<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(ArrayD::ones(IxDyn(&[channels]))),
            beta: Param::new(ArrayD::zeros(IxDyn(&[channels]))),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: F::of(0.1),
            eps: F::of(1e-5),
            cache: None,
        }
    }

    fn normalize(&self, x: &Array4<F>, mean: &Array1<F>, inv_std: &Array1<F>) -> (Array4<F>, Array4<F>) {
        let mut xhat = x.clone();
        for (c, mut plane) in xhat.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (mean[c], inv_std[c]);
            plane.mapv_inplace(|v| (v - m) * s);
        }
        let gamma = vec1(&self.gamma.value);
        let beta = vec1(&self.beta.value);
        let mut y = xhat.clone();
        for (c, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
            let (g, b) = (gamma[c], beta[c]);
            plane.mapv_inplace(|v| v * g + b);
        }
        (xhat, y)
    }

    pub fn forward_eval(&self, x: &Array4<F>) -> Array4<F> {
        let inv_std = self.running_var.mapv(|v| F::one() / (v + self.eps).sqrt());
        self.normalize(x, &self.running_mean, &inv_std).1
    }

    pub fn forward_train(&mut self, x: &Array4<F>) -> Array4<F> {
        let channels = x.shape()[1];
        let count = x.len() / channels;
        let cnt = F::of(count as f64);
        let mut mean = Array1::zeros(channels);
        let mut var = Array1::zeros(channels);
        for (c, plane) in x.axis_iter(Axis(1)).enumerate() {
            let m = plane.sum() / cnt;
            let v = plane.fold(F::zero(), |acc, &e| acc + (e - m) * (e - m)) / cnt;
            mean[c] = m;
            var[c] = v;
        }
        let inv_std = var.mapv(|v: F| F::one() / (v + self.eps).sqrt());
        let (xhat, y) = self.normalize(x, &mean, &inv_std);
        let unbias = if count > 1 { cnt / (cnt - F::one()) } else { F::one() };
        let mo = self.momentum;
        self.running_mean = &self.running_mean * (F::one() - mo) + &mean * mo;
        self.running_var = &self.running_var * (F::one() - mo) + &(var * unbias) * mo;
        self.cache = Some((xhat, inv_std));
        y
    }

    pub fn backward(&mut self, dy: &Array4<F>) -> Array4<F> {
        let (xhat, inv_std) = self.cache.take().expect("bn backward without forward");
        let channels = dy.shape()[1];
        let cnt = F::of((dy.len() / channels) as f64);
        let gamma = vec1(&self.gamma.value).to_owned();
        let mut dx = Array4::zeros(dy.raw_dim());
        for c in 0..channels {
            let dyc = dy.index_axis(Axis(1), c);
            let xc = xhat.index_axis(Axis(1), c);
            let sum_dy = dyc.sum();
            let sum_dy_x = ndarray::Zip::from(&dyc)
                .and(&xc)
                .fold(F::zero(), |acc, &a, &b| acc + a * b);
            self.gamma.grad[[c]] += sum_dy_x;
            self.beta.grad[[c]] += sum_dy;
            let scale = gamma[c] * inv_std[c] / cnt;
            let mut dxc = dx.index_axis_mut(Axis(1), c);
            ndarray::Zip::from(&mut dxc)
                .and(&dyc)
                .and(&xc)
                .for_each(|o, &g, &xh| *o = scale * (cnt * g - sum_dy - xh * sum_dy_x));
        }
        dx
    }
}

#[derive(Clone, Debug, Default)]
pub struct Relu<F> {
    mask: Option<ArrayD<bool>>,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Real> Relu<F> {
    pub fn new() -> Self {
        Self { mask: None, _marker: Default::default() }
    }

    pub fn forward_eval<D: ndarray::Dimension>(&self, x: &ndarray::Array<F, D>) -> ndarray::Array<F, D> {
        x.mapv(|v| if v > F::zero() { v } else { F::zero() })
    }

    pub fn forward_train<D: ndarray::Dimension>(&mut self, x: &ndarray::Array<F, D>) -> ndarray::Array<F, D> {
        self.mask = Some(x.mapv(|v| v > F::zero()).into_dyn());
        self.forward_eval(x)
    }

    pub fn backward<D: ndarray::Dimension>(&mut self, dy: &ndarray::Array<F, D>) -> ndarray::Array<F, D> {
        let mask = self.mask.take().expect("relu backward without forward");
        let mut dx = dy.clone();
        ndarray::Zip::from(dx.view_mut().into_dyn())
            .and(&mask)
            .for_each(|d, &m| {
                if !m {
                    *d = F::zero()
                }
            });
        dx
    }
}

/// Max pooling with square windows and no padding.
#[derive(Clone, Debug)]
pub struct MaxPool2d {
    kernel: usize,
    stride: usize,
    cache: Option<(Vec<usize>, [usize; 4])>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize) -> Self {
        Self { kernel, stride, cache: None }
    }

    fn run<F: Real>(&self, x: &Array4<F>) -> (Array4<F>, Vec<usize>) {
        let (n, c, h, w) = x.dim();
        let oh = window_output(h, self.kernel, self.stride, 0).expect("pool window");
        let ow = window_output(w, self.kernel, self.stride, 0).expect("pool window");
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("contiguous");
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut arg = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * self.stride * w + ox * self.stride;
                    for ky in 0..self.kernel {
                        for kx in 0..self.kernel {
                            let idx = base + (oy * self.stride + ky) * w + ox * self.stride + kx;
                            if xs[idx] > xs[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xs[best]);
                    arg.push(best);
                }
            }
        }
        (Array4::from_shape_vec((n, c, oh, ow), out).expect("pool shape"), arg)
    }

    pub fn forward_eval<F: Real>(&self, x: &Array4<F>) -> Array4<F> {
        self.run(x).0
    }

    pub fn forward_train<F: Real>(&mut self, x: &Array4<F>) -> Array4<F> {
        let (y, arg) = self.run(x);
        let d = x.dim();
        self.cache = Some((arg, [d.0, d.1, d.2, d.3]));
        y
    }

    pub fn backward<F: Real>(&mut self, dy: &Array4<F>) -> Array4<F> {
        let (arg, shape) = self.cache.take().expect("pool backward without forward");
        let mut dx = vec![F::zero(); shape.iter().product()];
        for (&idx, &g) in arg.iter().zip(dy.iter()) {
            dx[idx] += g;
        }
        Array4::from_shape_vec((shape[0], shape[1], shape[2], shape[3]), dx).expect("pool grad")
    }
}

/// Spatial mean per channel: `(N, C, H, W) -> (N, C)`.
pub fn global_avg_pool<F: Real>(x: &Array4<F>) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let flat = x
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, c, h * w))
        .expect("gap");
    flat.mean_axis(Axis(2)).expect("nonempty")
}

pub fn global_avg_pool_backward<F: Real>(dy: &Array2<F>, h: usize, w: usize) -> Array4<F> {
    let (n, c) = dy.dim();
    let scale = F::one() / F::of((h * w) as f64);
    let mut dx = Array4::zeros((n, c, h, w));
    for b in 0..n {
        for ch in 0..c {
            dx.slice_mut(ndarray::s![b, ch, .., ..]).fill(dy[[b, ch]] * scale);
        }
    }
    dx
}

/// Fully connected layer `y = x W^T + b`.
#[derive(Clone, Debug)]
pub struct Linear<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    cache: Option<Array2<F>>,
}

impl<F: Real> Linear<F> {
    pub fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            weight: Param::uniform(&[outputs, inputs], bound, rng),
            bias: Param::uniform(&[outputs], bound, rng),
            cache: None,
        }
    }

    pub fn forward_eval(&self, x: &Array2<F>) -> Array2<F> {
        x.dot(&mat(&self.weight.value).t()) + &vec1(&self.bias.value)
    }

    pub fn forward_train(&mut self, x: &Array2<F>) -> Array2<F> {
        self.cache = Some(x.clone());
        self.forward_eval(x)
    }

    pub fn backward(&mut self, dy: &Array2<F>) -> Array2<F> {
        let x = self.cache.take().expect("linear backward without forward");
        let dw = dy.t().dot(&x);
        let mut gw = self.weight.grad.view_mut().into_dimensionality::<ndarray::Ix2>().expect("2-d");
        gw += &dw;
        let mut gb = self.bias.grad.view_mut().into_dimensionality::<ndarray::Ix1>().expect("1-d");
        gb += &dy.sum_axis(Axis(0));
        dy.dot(&mat(&self.weight.value))
    }
}

/// Row-wise softmax, stable for large logits.
pub fn softmax_rows<F: Real>(z: &Array2<F>) -> Array2<F> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(F::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Pulls a gradient on softmax outputs back to the logits.
pub fn softmax_backward<F: Real>(p: &Array2<F>, dp: &Array2<F>) -> Array2<F> {
    let mut dz = Array2::zeros(p.raw_dim());
    for ((pr, gr), mut out) in p.rows().into_iter().zip(dp.rows()).zip(dz.rows_mut()) {
        let dot = pr.dot(&gr);
        ndarray::Zip::from(&mut out)
            .and(&pr)
            .and(&gr)
            .for_each(|o, &pv, &g| *o = pv * (g - dot));
    }
    dz
}

/// A 4-d feature layer.
#[derive(Clone, Debug)]
pub enum FeatureLayer<F> {
    Conv(Conv2d<F>),
    Norm(BatchNorm2d<F>),
    Relu(Relu<F>),
    Pool(MaxPool2d),
}

impl<F: Real> FeatureLayer<F> {
    pub fn forward_eval(&self, x: &Array4<F>) -> Array4<F> {
        match self {
            Self::Conv(l) => l.forward_eval(x),
            Self::Norm(l) => l.forward_eval(x),
            Self::Relu(l) => l.forward_eval(x),
            Self::Pool(l) => l.forward_eval(x),
        }
    }

    pub fn forward_train(&mut self, x: &Array4<F>) -> Array4<F> {
        match self {
            Self::Conv(l) => l.forward_train(x),
            Self::Norm(l) => l.forward_train(x),
            Self::Relu(l) => l.forward_train(x),
            Self::Pool(l) => l.forward_train(x),
        }
    }

    pub fn backward(&mut self, dy: &Array4<F>, need_input_grad: bool) -> Option<Array4<F>> {
        match self {
            Self::Conv(l) => l.backward(dy, need_input_grad),
            Self::Norm(l) => Some(l.backward(dy)),
            Self::Relu(l) => Some(l.backward(dy)),
            Self::Pool(l) => Some(l.backward(dy)),
        }
    }
}

/// Ordered stack of feature layers.
#[derive(Clone, Debug, Default)]
pub struct FeatureStack<F> {
    pub layers: Vec<FeatureLayer<F>>,
}

impl<F: Real> FeatureStack<F> {
    /// Appends `conv -> batch norm -> ReLU`.
    pub fn push_conv_block<R: Rng>(
        &mut self,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) {
        self.layers.push(FeatureLayer::Conv(Conv2d::new(
            in_channels,
            out_channels,
            (kernel, kernel),
            stride,
            padding,
            rng,
        )));
        self.layers.push(FeatureLayer::Norm(BatchNorm2d::new(out_channels)));
        self.layers.push(FeatureLayer::Relu(Relu::new()));
    }

    pub fn push_pool(&mut self, kernel: usize, stride: usize) {
        self.layers.push(FeatureLayer::Pool(MaxPool2d::new(kernel, stride)));
    }

    pub fn forward_eval(&self, x: &Array4<F>) -> Array4<F> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward_eval(&cur);
        }
        cur
    }

    pub fn forward_train(&mut self, x: &Array4<F>) -> Array4<F> {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward_train(&cur);
        }
        cur
    }

    /// Backpropagates through the stack. The first layer's input gradient is
    /// skipped unless `need_input_grad`.
    pub fn backward(&mut self, dy: &Array4<F>, need_input_grad: bool) -> Option<Array4<F>> {
        let mut cur = dy.clone();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            cur = layer.backward(&cur, need_input_grad || i > 0)?;
        }
        Some(cur)
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                FeatureLayer::Conv(c) => out.push(&c.weight),
                FeatureLayer::Norm(b) => {
                    out.push(&b.gamma);
                    out.push(&b.beta);
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                FeatureLayer::Conv(c) => out.push(&mut c.weight),
                FeatureLayer::Norm(b) => {
                    out.push(&mut b.gamma);
                    out.push(&mut b.beta);
                }
                _ => {}
            }
        }
        out
    }

    pub fn buffers(&self) -> Vec<&Array1<F>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            if let FeatureLayer::Norm(b) = layer {
                out.push(&b.running_mean);
                out.push(&b.running_var);
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Array1<F>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            if let FeatureLayer::Norm(b) = layer {
                out.push(&mut b.running_mean);
                out.push(&mut b.running_var);
            }
        }
        out
    }
}

/// `Linear -> ReLU -> ... -> Linear`; the last layer has no activation.
#[derive(Clone, Debug)]
pub struct Mlp<F> {
    pub layers: Vec<Linear<F>>,
    relus: Vec<Relu<F>>,
}

impl<F: Real> Mlp<F> {
    /// Square layers start at identity plus the usual fan-in noise with a
    /// zero bias. With nonnegative inputs and narrow widths, plain random
    /// init often leaves every unit of a hidden layer dead.
    pub fn new<R: Rng>(widths: &[usize], rng: &mut R) -> Self {
        let layers: Vec<_> = widths
            .windows(2)
            .map(|w| {
                let mut layer = Linear::new(w[0], w[1], rng);
                if w[0] == w[1] {
                    for i in 0..w[0] {
                        layer.weight.value[[i, i]] += F::one();
                    }
                    layer.bias.value.fill(F::zero());
                }
                layer
            })
            .collect();
        let relus = (1..layers.len()).map(|_| Relu::new()).collect();
        Self { layers, relus }
    }

    pub fn forward_eval(&self, x: &Array2<F>) -> Array2<F> {
        let mut cur = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            cur = l.forward_eval(&cur);
            if i + 1 < self.layers.len() {
                cur = self.relus[i].forward_eval(&cur);
            }
        }
        cur
    }

    pub fn forward_train(&mut self, x: &Array2<F>) -> Array2<F> {
        let mut cur = x.clone();
        let count = self.layers.len();
        for i in 0..count {
            cur = self.layers[i].forward_train(&cur);
            if i + 1 < count {
                cur = self.relus[i].forward_train(&cur);
            }
        }
        cur
    }

    pub fn backward(&mut self, dy: &Array2<F>) -> Array2<F> {
        let mut cur = dy.clone();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                cur = self.relus[i].backward(&cur);
            }
            cur = self.layers[i].backward(&cur);
        }
        cur
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}
