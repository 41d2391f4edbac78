//! Teacher and student networks: dense backbones, small convolutional nets
//! and the linear classifier that maps features to logits.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, GenddError, Result};
use crate::nn::{Linear, Params};

fn prefixed<'a>(prefix: &'a str, f: &'a mut dyn FnMut(&str, &[f64])) -> impl FnMut(&str, &[f64]) + 'a {
    move |name, t| f(&format!("{prefix}.{name}"), t)
}

fn prefixed_mut<'a>(
    prefix: &'a str,
    f: &'a mut dyn FnMut(&str, &mut [f64]),
) -> impl FnMut(&str, &mut [f64]) + 'a {
    move |name, t| f(&format!("{prefix}.{name}"), t)
}

/// Frozen map from features to class logits. Row `y` of `weight` is `W_y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    /// `C x d`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearClassifier {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        ensure!(weight.nrows() >= 1 && weight.ncols() >= 1, "classifier needs at least one class and one feature");
        ensure!(bias.len() == weight.nrows(), "bias has {} entries for {} classes", bias.len(), weight.nrows());
        Ok(LinearClassifier { weight, bias })
    }

    pub fn init(feature_dim: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lin = Linear::xavier(feature_dim, num_classes, &mut rng);
        LinearClassifier { weight: lin.weight.t().as_standard_layout().into_owned(), bias: lin.bias }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn logits(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        ensure!(
            features.ncols() == self.feature_dim(),
            "classifier expects {} features, got {}",
            self.feature_dim(),
            features.ncols()
        );
        let mut out = features.dot(&self.weight.t());
        out += &self.bias;
        Ok(out)
    }

    /// Accumulates parameter gradients and returns `dL/dfeatures`.
    pub fn backward(&self, features: ArrayView2<f64>, d_logits: ArrayView2<f64>, grad: &mut LinearClassifier) -> Array2<f64> {
        grad.weight += &d_logits.t().dot(&features);
        grad.bias += &d_logits.sum_axis(Axis(0));
        d_logits.dot(&self.weight)
    }
}

impl Params for LinearClassifier {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("weight", self.weight.as_slice().expect("standard layout"));
        f("bias", self.bias.as_slice().expect("standard layout"));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("weight", self.weight.as_slice_mut().expect("standard layout"));
        f("bias", self.bias.as_slice_mut().expect("standard layout"));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    /// Plain vectors are `d x 1 x 1`.
    pub fn vector(dim: usize) -> Self {
        InputShape { channels: dim, height: 1, width: 1 }
    }

    pub fn image(channels: usize, height: usize, width: usize) -> Self {
        InputShape { channels, height, width }
    }

    pub fn flat_dim(&self) -> usize {
        self.channels * self.height * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArchKind {
    #[serde(rename = "linear")]
    Linear,
    #[serde(rename = "mlp")]
    Mlp,
    #[serde(rename = "cnn-small")]
    CnnSmall,
    #[serde(rename = "cnn-wide")]
    CnnWide,
    #[serde(rename = "resnet8x4")]
    Resnet8x4,
    #[serde(rename = "resnet32x4")]
    Resnet32x4,
}

impl ArchKind {
    pub const ALL: [ArchKind; 6] = [
        ArchKind::Linear,
        ArchKind::Mlp,
        ArchKind::CnnSmall,
        ArchKind::CnnWide,
        ArchKind::Resnet8x4,
        ArchKind::Resnet32x4,
    ];

    /// Output width for dense nets, base channel count for conv nets.
    pub fn default_width(self) -> usize {
        match self {
            ArchKind::Linear | ArchKind::Mlp => 64,
            ArchKind::CnnSmall => 16,
            ArchKind::CnnWide => 32,
            ArchKind::Resnet8x4 | ArchKind::Resnet32x4 => 32,
        }
    }

    pub fn is_convolutional(self) -> bool {
        !matches!(self, ArchKind::Linear | ArchKind::Mlp)
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchKind::Linear => "linear",
            ArchKind::Mlp => "mlp",
            ArchKind::CnnSmall => "cnn-small",
            ArchKind::CnnWide => "cnn-wide",
            ArchKind::Resnet8x4 => "resnet8x4",
            ArchKind::Resnet32x4 => "resnet32x4",
        })
    }
}

impl FromStr for ArchKind {
    type Err = GenddError;

    fn from_str(s: &str) -> Result<Self> {
        ArchKind::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| GenddError::Config(format!("unknown architecture `{s}`")))
    }
}

/// Activations stored channels-last: row `(b * h + i) * w + j` holds the
/// channel vector at pixel `(i, j)` of sample `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Array2<f64>,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl FeatureMap {
    /// From flat `c x h x w` rows.
    pub fn from_flat(x: ArrayView2<f64>, shape: InputShape) -> Result<Self> {
        ensure!(x.ncols() == shape.flat_dim(), "input has {} values per sample, expected {}", x.ncols(), shape.flat_dim());
        let (b, c, h, w) = (x.nrows(), shape.channels, shape.height, shape.width);
        let mut data = Array2::zeros((b * h * w, c));
        for (s, row) in x.rows().into_iter().enumerate() {
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        data[[(s * h + i) * w + j, ch]] = row[(ch * h + i) * w + j];
                    }
                }
            }
        }
        Ok(FeatureMap { data, batch: b, height: h, width: w })
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }
}

fn im2col(x: &FeatureMap, k: usize) -> Array2<f64> {
    let (c, h, w) = (x.channels(), x.height, x.width);
    let pad = (k / 2) as isize;
    let mut cols = Array2::zeros((x.data.nrows(), k * k * c));
    let data = x.data.as_standard_layout();
    let src = data.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().expect("standard layout");
    for b in 0..x.batch {
        for i in 0..h {
            for j in 0..w {
                let r = (b * h + i) * w + j;
                for ky in 0..k {
                    let yy = i as isize + ky as isize - pad;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let xx = j as isize + kx as isize - pad;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let s = ((b * h + yy as usize) * w + xx as usize) * c;
                        let d = r * k * k * c + (ky * k + kx) * c;
                        dst[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, like: &FeatureMap, k: usize) -> Array2<f64> {
    let (c, h, w) = (like.channels(), like.height, like.width);
    let pad = (k / 2) as isize;
    let mut out = Array2::zeros(like.data.dim());
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().expect("standard layout");
    for b in 0..like.batch {
        for i in 0..h {
            for j in 0..w {
                let r = (b * h + i) * w + j;
                for ky in 0..k {
                    let yy = i as isize + ky as isize - pad;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let xx = j as isize + kx as isize - pad;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let d = ((b * h + yy as usize) * w + xx as usize) * c;
                        let s = r * k * k * c + (ky * k + kx) * c;
                        for (o, v) in dst[d..d + c].iter_mut().zip(&src[s..s + c]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Same-padded, stride-1 convolution with an odd square kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub kernel: usize,
    /// `(k * k * in) x out`.
    pub linear: Linear,
}

impl Conv2d {
    fn he(kernel: usize, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Conv2d { kernel, linear: Linear::he(kernel * kernel * input, output, rng) }
    }

    fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let data = if self.kernel == 1 {
            self.linear.forward(x.data.view())
        } else {
            self.linear.forward(im2col(x, self.kernel).view())
        };
        FeatureMap { data, ..*x }
    }

    fn backward(&self, x: &FeatureMap, dy: ArrayView2<f64>, grad: &mut Conv2d) -> Array2<f64> {
        if self.kernel == 1 {
            return self.linear.backward(x.data.view(), dy, &mut grad.linear);
        }
        let cols = im2col(x, self.kernel);
        let dcols = self.linear.backward(cols.view(), dy, &mut grad.linear);
        col2im(&dcols, x, self.kernel)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct FeatureMapShape {
    batch: usize,
    height: usize,
    width: usize,
}

impl FeatureMap {
    fn shape(&self) -> FeatureMapShape {
        FeatureMapShape { batch: self.batch, height: self.height, width: self.width }
    }
}

fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Masks `dy` where the post-activation output is zero.
fn relu_backward(out: &Array2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
    let mut d = dy.to_owned();
    Zip::from(&mut d).and(out).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0
        }
    });
    d
}

fn avg_pool(x: &FeatureMap) -> FeatureMap {
    let (h2, w2, c) = (x.height / 2, x.width / 2, x.channels());
    let mut data = Array2::zeros((x.batch * h2 * w2, c));
    for b in 0..x.batch {
        for i in 0..h2 {
            for j in 0..w2 {
                let mut row = data.row_mut((b * h2 + i) * w2 + j);
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    row.scaled_add(0.25, &x.data.row((b * x.height + 2 * i + di) * x.width + 2 * j + dj));
                }
            }
        }
    }
    FeatureMap { data, batch: x.batch, height: h2, width: w2 }
}

fn avg_pool_backward(input: FeatureMapShape, dy: ArrayView2<f64>) -> Array2<f64> {
    let (h2, w2) = (input.height / 2, input.width / 2);
    let mut dx = Array2::zeros((input.batch * input.height * input.width, dy.ncols()));
    for b in 0..input.batch {
        for i in 0..h2 {
            for j in 0..w2 {
                let g = dy.row((b * h2 + i) * w2 + j);
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    dx.row_mut((b * input.height + 2 * i + di) * input.width + 2 * j + dj).scaled_add(0.25, &g);
                }
            }
        }
    }
    dx
}

/// `relu(conv2(relu(conv1(x))) + shortcut(x))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub shortcut: Option<Conv2d>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ConvLayer {
    Conv(Conv2d),
    Relu,
    Pool,
    Residual(ResidualBlock),
}

enum LayerCache {
    Conv(FeatureMap),
    Relu(Array2<f64>),
    Pool(FeatureMapShape),
    Residual { x: FeatureMap, hidden: FeatureMap, out: Array2<f64> },
}

impl ConvLayer {
    fn forward(&self, x: FeatureMap) -> (FeatureMap, LayerCache) {
        match self {
            ConvLayer::Conv(conv) => (conv.forward(&x), LayerCache::Conv(x)),
            ConvLayer::Relu => {
                let out = FeatureMap { data: relu(&x.data), ..x };
                let cache = LayerCache::Relu(out.data.clone());
                (out, cache)
            }
            ConvLayer::Pool => {
                let shape = x.shape();
                (avg_pool(&x), LayerCache::Pool(shape))
            }
            ConvLayer::Residual(block) => {
                let h = block.conv1.forward(&x);
                let hidden = FeatureMap { data: relu(&h.data), ..h };
                let mut y = block.conv2.forward(&hidden);
                match &block.shortcut {
                    Some(sc) => y.data += &sc.forward(&x).data,
                    None => y.data += &x.data,
                }
                y.data.mapv_inplace(|v| v.max(0.0));
                let out = y.data.clone();
                (y, LayerCache::Residual { x, hidden, out })
            }
        }
    }

    fn backward(&self, cache: &LayerCache, dy: ArrayView2<f64>, grad: &mut ConvLayer) -> Array2<f64> {
        match (self, cache, grad) {
            (ConvLayer::Conv(conv), LayerCache::Conv(x), ConvLayer::Conv(g)) => conv.backward(x, dy, g),
            (ConvLayer::Relu, LayerCache::Relu(out), _) => relu_backward(out, dy),
            (ConvLayer::Pool, LayerCache::Pool(shape), _) => avg_pool_backward(*shape, dy),
            (ConvLayer::Residual(block), LayerCache::Residual { x, hidden, out }, ConvLayer::Residual(g)) => {
                let d_sum = relu_backward(out, dy);
                let d_hidden = block.conv2.backward(hidden, d_sum.view(), &mut g.conv2);
                let d_h = relu_backward(&hidden.data, d_hidden.view());
                let mut dx = block.conv1.backward(x, d_h.view(), &mut g.conv1);
                match (&block.shortcut, &mut g.shortcut) {
                    (Some(sc), Some(gs)) => dx += &sc.backward(x, d_sum.view(), gs),
                    _ => dx += &d_sum,
                }
                dx
            }
            _ => unreachable!("layer, cache and gradient variants always match"),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        match self {
            ConvLayer::Conv(c) => c.linear.visit(&mut prefixed(prefix, f)),
            ConvLayer::Residual(b) => {
                b.conv1.linear.visit(&mut prefixed(&format!("{prefix}.conv1"), f));
                b.conv2.linear.visit(&mut prefixed(&format!("{prefix}.conv2"), f));
                if let Some(sc) = &b.shortcut {
                    sc.linear.visit(&mut prefixed(&format!("{prefix}.shortcut"), f));
                }
            }
            ConvLayer::Relu | ConvLayer::Pool => {}
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        match self {
            ConvLayer::Conv(c) => c.linear.visit_mut(&mut prefixed_mut(prefix, f)),
            ConvLayer::Residual(b) => {
                b.conv1.linear.visit_mut(&mut prefixed_mut(&format!("{prefix}.conv1"), f));
                b.conv2.linear.visit_mut(&mut prefixed_mut(&format!("{prefix}.conv2"), f));
                if let Some(sc) = &mut b.shortcut {
                    sc.linear.visit_mut(&mut prefixed_mut(&format!("{prefix}.shortcut"), f));
                }
            }
            ConvLayer::Relu | ConvLayer::Pool => {}
        }
    }
}

/// Conv stack followed by global average pooling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvNet {
    pub input: InputShape,
    pub layers: Vec<ConvLayer>,
}

impl ConvNet {
    fn output_dim(&self) -> usize {
        let mut c = self.input.channels;
        for layer in &self.layers {
            match layer {
                ConvLayer::Conv(conv) => c = conv.linear.output_dim(),
                ConvLayer::Residual(b) => c = b.conv2.linear.output_dim(),
                ConvLayer::Relu | ConvLayer::Pool => {}
            }
        }
        c
    }
}

/// Dense layers with ReLU between them (none after the last).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    pub layers: Vec<Linear>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Backbone {
    Dense(DenseNet),
    Conv(ConvNet),
}

pub struct BackboneCache {
    inner: CacheKind,
}

enum CacheKind {
    /// Input to each dense layer.
    Dense(Vec<Array2<f64>>),
    Conv { layers: Vec<LayerCache>, last: FeatureMapShape },
}

impl Backbone {
    pub fn build(arch: ArchKind, input: InputShape, width: usize, seed: u64) -> Result<Self> {
        ensure!(width >= 1, "architecture width must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = input.flat_dim();
        ensure!(d >= 1, "input dimension must be positive");
        let conv_input_ok = |pools: u32| {
            let f = 1usize << pools;
            input.height % f == 0 && input.width % f == 0
        };
        Ok(match arch {
            ArchKind::Linear => Backbone::Dense(DenseNet { layers: vec![Linear::xavier(d, width, &mut rng)] }),
            ArchKind::Mlp => Backbone::Dense(DenseNet {
                layers: vec![Linear::he(d, width, &mut rng), Linear::xavier(width, width, &mut rng)],
            }),
            ArchKind::CnnSmall | ArchKind::CnnWide => {
                ensure!(conv_input_ok(2), "{arch} needs spatial dims divisible by 4, got {}x{}", input.height, input.width);
                let c = input.channels;
                Backbone::Conv(ConvNet {
                    input,
                    layers: vec![
                        ConvLayer::Conv(Conv2d::he(3, c, width, &mut rng)),
                        ConvLayer::Relu,
                        ConvLayer::Pool,
                        ConvLayer::Conv(Conv2d::he(3, width, 2 * width, &mut rng)),
                        ConvLayer::Relu,
                        ConvLayer::Pool,
                        ConvLayer::Conv(Conv2d::he(3, 2 * width, 4 * width, &mut rng)),
                        ConvLayer::Relu,
                    ],
                })
            }
            ArchKind::Resnet8x4 | ArchKind::Resnet32x4 => {
                ensure!(conv_input_ok(2), "{arch} needs spatial dims divisible by 4, got {}x{}", input.height, input.width);
                let blocks = if arch == ArchKind::Resnet8x4 { 1 } else { 5 };
                let mut layers = vec![ConvLayer::Conv(Conv2d::he(3, input.channels, width, &mut rng)), ConvLayer::Relu];
                let mut c = width;
                for (stage, out) in [2 * width, 4 * width, 8 * width].into_iter().enumerate() {
                    if stage > 0 {
                        layers.push(ConvLayer::Pool);
                    }
                    for _ in 0..blocks {
                        let mut conv2 = Conv2d::he(3, out, out, &mut rng);
                        // keep the residual sum near unit scale without normalization layers
                        conv2.linear.weight.mapv_inplace(|v| v * 0.2);
                        let shortcut = (c != out).then(|| Conv2d::he(1, c, out, &mut rng));
                        layers.push(ConvLayer::Residual(ResidualBlock {
                            conv1: Conv2d::he(3, c, out, &mut rng),
                            conv2,
                            shortcut,
                        }));
                        c = out;
                    }
                }
                Backbone::Conv(ConvNet { input, layers })
            }
        })
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Backbone::Dense(net) => net.layers[0].input_dim(),
            Backbone::Conv(net) => net.input.flat_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Backbone::Dense(net) => net.layers.last().expect("at least one layer").output_dim(),
            Backbone::Conv(net) => net.output_dim(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, BackboneCache)> {
        ensure!(x.ncols() == self.input_dim(), "backbone expects {} inputs, got {}", self.input_dim(), x.ncols());
        match self {
            Backbone::Dense(net) => {
                let mut inputs = Vec::with_capacity(net.layers.len());
                let mut h = x.to_owned();
                for (i, layer) in net.layers.iter().enumerate() {
                    let mut next = layer.forward(h.view());
                    if i + 1 < net.layers.len() {
                        next.mapv_inplace(|v| v.max(0.0));
                    }
                    inputs.push(h);
                    h = next;
                }
                Ok((h, BackboneCache { inner: CacheKind::Dense(inputs) }))
            }
            Backbone::Conv(net) => {
                let mut fm = FeatureMap::from_flat(x, net.input)?;
                let mut caches = Vec::with_capacity(net.layers.len());
                for layer in &net.layers {
                    let (next, cache) = layer.forward(fm);
                    caches.push(cache);
                    fm = next;
                }
                let last = fm.shape();
                let hw = (fm.height * fm.width) as f64;
                let c = fm.channels();
                let pooled = fm
                    .data
                    .into_shape_with_order((fm.batch, fm.height * fm.width, c))
                    .expect("contiguous")
                    .sum_axis(Axis(1))
                    / hw;
                Ok((pooled, BackboneCache { inner: CacheKind::Conv { layers: caches, last } }))
            }
        }
    }

    pub fn features(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x)?.0)
    }

    /// Features in chunks of `batch` rows to bound activation memory.
    pub fn features_chunked(&self, x: ArrayView2<f64>, batch: usize) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((x.nrows(), self.output_dim()));
        let mut start = 0;
        while start < x.nrows() {
            let end = (start + batch.max(1)).min(x.nrows());
            let f = self.features(x.slice(ndarray::s![start..end, ..]))?;
            out.slice_mut(ndarray::s![start..end, ..]).assign(&f);
            start = end;
        }
        Ok(out)
    }

    /// Parameter gradients for upstream gradient `d_out`.
    pub fn backward(&self, cache: &BackboneCache, d_out: ArrayView2<f64>) -> Backbone {
        let mut grad = self.zeros_like();
        match (self, &cache.inner, &mut grad) {
            (Backbone::Dense(net), CacheKind::Dense(inputs), Backbone::Dense(g)) => {
                let mut dy = d_out.to_owned();
                for i in (0..net.layers.len()).rev() {
                    let dx = net.layers[i].backward(inputs[i].view(), dy.view(), &mut g.layers[i]);
                    // inputs[i] is the post-ReLU output of layer i - 1
                    dy = if i > 0 { relu_backward(&inputs[i], dx.view()) } else { dx };
                }
            }
            (Backbone::Conv(net), CacheKind::Conv { layers, last }, Backbone::Conv(g)) => {
                let hw = last.height * last.width;
                let mut dy = Array2::zeros((last.batch * hw, d_out.ncols()));
                for (r, mut row) in dy.axis_iter_mut(Axis(0)).enumerate() {
                    row.scaled_add(1.0 / hw as f64, &d_out.row(r / hw));
                }
                for i in (0..net.layers.len()).rev() {
                    dy = net.layers[i].backward(&layers[i], dy.view(), &mut g.layers[i]);
                }
            }
            _ => unreachable!("cache matches backbone"),
        }
        grad
    }
}

impl Params for Backbone {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        match self {
            Backbone::Dense(net) => {
                for (i, l) in net.layers.iter().enumerate() {
                    l.visit(&mut prefixed(&format!("dense.{i}"), f));
                }
            }
            Backbone::Conv(net) => {
                for (i, l) in net.layers.iter().enumerate() {
                    l.visit(&format!("conv.{i}"), f);
                }
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        match self {
            Backbone::Dense(net) => {
                for (i, l) in net.layers.iter_mut().enumerate() {
                    l.visit_mut(&mut prefixed_mut(&format!("dense.{i}"), f));
                }
            }
            Backbone::Conv(net) => {
                for (i, l) in net.layers.iter_mut().enumerate() {
                    l.visit_mut(&format!("conv.{i}"), f);
                }
            }
        }
    }
}

/// Backbone plus linear classifier; used for teachers and KL students.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub arch: ArchKind,
    pub backbone: Backbone,
    pub classifier: LinearClassifier,
}

impl Network {
    pub fn build(arch: ArchKind, input: InputShape, width: usize, num_classes: usize, seed: u64) -> Result<Self> {
        ensure!(num_classes >= 2, "need at least two classes, got {num_classes}");
        let backbone = Backbone::build(arch, input, width, seed)?;
        let classifier = LinearClassifier::init(backbone.output_dim(), num_classes, seed ^ 0x5eed);
        Ok(Network { arch, backbone, classifier })
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.num_classes()
    }

    pub fn logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let f = self.backbone.features(x)?;
        self.classifier.logits(f.view())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>, BackboneCache)> {
        let (features, cache) = self.backbone.forward(x)?;
        let logits = self.classifier.logits(features.view())?;
        Ok((logits, features, cache))
    }

    pub fn backward(&self, features: ArrayView2<f64>, cache: &BackboneCache, d_logits: ArrayView2<f64>) -> Network {
        let mut classifier = self.classifier.clone();
        classifier.zero();
        let d_features = self.classifier.backward(features, d_logits, &mut classifier);
        Network { arch: self.arch, backbone: self.backbone.backward(cache, d_features.view()), classifier }
    }
}

impl Params for Network {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.backbone.visit(&mut prefixed("backbone", f));
        self.classifier.visit(&mut prefixed("classifier", f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.backbone.visit_mut(&mut prefixed_mut("backbone", f));
        self.classifier.visit_mut(&mut prefixed_mut("classifier", f));
    }
}
