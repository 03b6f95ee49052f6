//! Minimal dense-tensor network engine.
//!
//! Inputs are square `C×S×S` feature maps (or flat vectors, which are treated
//! as `D×1×1`). Convolutions are unpadded.

mod backprop;
mod optim;
pub(crate) mod train;

pub use backprop::{compute_gradients, cross_entropy, softmax, Gradients};
pub use optim::{Adam, AdamConfig, Sgd};
pub use train::{fine_tune, train_gaussian, TrainConfig, TrainReport};

pub(crate) use backprop::{backward, Trace};

use rand::Rng;

use crate::error::{Error, Result};
use crate::quant::{quantize_value, QuantMode};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Dense,
    Conv2d,
    Relu,
    AvgPool2d,
    Flatten,
}

impl LayerKind {
    pub fn is_quantizable(self) -> bool {
        matches!(self, LayerKind::Dense | LayerKind::Conv2d)
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            LayerKind::Dense => 0,
            LayerKind::Conv2d => 1,
            LayerKind::Relu => 2,
            LayerKind::AvgPool2d => 3,
            LayerKind::Flatten => 4,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => LayerKind::Dense,
            1 => LayerKind::Conv2d,
            2 => LayerKind::Relu,
            3 => LayerKind::AvgPool2d,
            4 => LayerKind::Flatten,
            _ => return None,
        })
    }
}

/// Static description of one layer.
///
/// `feat` is the spatial side of the layer's input. Dense layers and any layer
/// operating on a flat vector use `feat = 1`, `kernel = stride = 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub index: usize,
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub feat: usize,
    pub depthwise: bool,
    pub n_params: usize,
}

impl LayerSpec {
    fn new(
        index: usize,
        kind: LayerKind,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        feat: usize,
        depthwise: bool,
    ) -> Self {
        let mut spec = Self {
            index,
            kind,
            c_in,
            c_out,
            kernel,
            stride,
            feat,
            depthwise,
            n_params: 0,
        };
        spec.n_params = spec.weight_count() + spec.bias_count();
        spec
    }

    /// Number of weights, biases excluded.
    pub fn weight_count(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.c_in * self.c_out,
            LayerKind::Conv2d if self.depthwise => self.c_out * self.kernel * self.kernel,
            LayerKind::Conv2d => self.c_out * self.c_in * self.kernel * self.kernel,
            _ => 0,
        }
    }

    pub fn bias_count(&self) -> usize {
        if self.kind.is_quantizable() {
            self.c_out
        } else {
            0
        }
    }

    pub fn out_feat(&self) -> usize {
        match self.kind {
            LayerKind::Conv2d | LayerKind::AvgPool2d => (self.feat - self.kernel) / self.stride + 1,
            LayerKind::Relu => self.feat,
            LayerKind::Dense | LayerKind::Flatten => 1,
        }
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.feat * self.feat
    }

    pub fn out_len(&self) -> usize {
        let f = self.out_feat();
        self.c_out * f * f
    }

    fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Dense => vec![self.c_out, self.c_in],
            LayerKind::Conv2d if self.depthwise => vec![self.c_out, 1, self.kernel, self.kernel],
            LayerKind::Conv2d => vec![self.c_out, self.c_in, self.kernel, self.kernel],
            _ => vec![],
        }
    }

    fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.c_in,
            LayerKind::Conv2d if self.depthwise => self.kernel * self.kernel,
            LayerKind::Conv2d => self.c_in * self.kernel * self.kernel,
            _ => 0,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Network(format!("layer {}: {msg}", self.index)));
        if self.c_in == 0 || self.c_out == 0 || self.feat == 0 {
            return bad("zero-sized dimension");
        }
        if self.kernel == 0 || self.stride == 0 {
            return bad("kernel and stride must be at least 1");
        }
        match self.kind {
            LayerKind::Dense if self.feat != 1 || self.kernel != 1 || self.stride != 1 => {
                bad("dense layers take flat inputs")
            }
            LayerKind::Conv2d | LayerKind::AvgPool2d if self.kernel > self.feat => {
                bad("kernel larger than feature map")
            }
            LayerKind::AvgPool2d if self.stride > self.kernel => bad("pool stride exceeds kernel"),
            LayerKind::AvgPool2d | LayerKind::Relu if self.c_in != self.c_out => {
                bad("channel count must be preserved")
            }
            LayerKind::Conv2d if self.depthwise && self.c_in != self.c_out => {
                bad("depthwise conv must preserve channels")
            }
            LayerKind::Flatten if self.c_out != self.c_in * self.feat * self.feat => {
                bad("flatten output size mismatch")
            }
            _ if self.n_params != self.weight_count() + self.bias_count() => {
                bad("parameter count mismatch")
            }
            _ => Ok(()),
        }
    }
}

/// Weight and bias of a dense or conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Fake-quantization applied to the tensor produced by a layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActQuant {
    pub bits: u32,
    pub clip: f64,
    pub mode: QuantMode,
}

/// A feed-forward classifier: the base classifier of the smoothing procedure.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Vec<Option<LayerParams>>,
    num_classes: usize,
}

impl Network {
    /// Assembles a network from parts, checking every structural invariant.
    pub fn from_parts(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        params: Vec<Option<LayerParams>>,
        num_classes: usize,
    ) -> Result<Self> {
        let (mut channels, mut feat) = split_input_shape(&input_shape)?;
        if layers.is_empty() {
            return Err(Error::Network("no layers".into()));
        }
        if layers.len() != params.len() {
            return Err(Error::Network("parameter list length mismatch".into()));
        }
        for (i, (spec, p)) in layers.iter().zip(&params).enumerate() {
            if spec.index != i {
                return Err(Error::Network(format!("layer {i} carries index {}", spec.index)));
            }
            spec.validate()?;
            if spec.c_in != channels || spec.feat != feat {
                return Err(Error::Network(format!(
                    "layer {i} expects {}x{}x{} input, previous layer yields {channels}x{feat}x{feat}",
                    spec.c_in, spec.feat, spec.feat
                )));
            }
            match (spec.kind.is_quantizable(), p) {
                (true, Some(p)) => {
                    if p.weight.shape() != spec.weight_shape().as_slice()
                        || p.bias.shape() != [spec.c_out]
                    {
                        return Err(Error::Network(format!("layer {i}: parameter shape mismatch")));
                    }
                }
                (false, None) => {}
                _ => return Err(Error::Network(format!("layer {i}: parameter presence mismatch"))),
            }
            channels = spec.c_out;
            feat = spec.out_feat();
        }
        if feat != 1 || channels != num_classes {
            return Err(Error::Network(format!(
                "network yields {channels}x{feat}x{feat}, expected {num_classes} logits"
            )));
        }
        Ok(Self {
            input_shape,
            layers,
            params,
            num_classes,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &[Option<LayerParams>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<LayerParams>] {
        &mut self.params
    }

    /// Indices of dense and conv layers, front to back.
    pub fn quantizable_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter(|l| l.kind.is_quantizable())
            .map(|l| l.index)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.n_params).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params
            .iter()
            .flatten()
            .all(|p| p.weight.is_finite() && p.bias.is_finite())
    }

    pub(crate) fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::Shape {
                expected: self.input_shape.clone(),
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Logits for one input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        Ok(Tensor::vector(self.run(x.data(), None, None)))
    }

    /// Index of the largest logit; ties go to the lowest index.
    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        self.check_input(x)?;
        Ok(argmax(&self.run(x.data(), None, None)))
    }

    /// Unchecked classification of a flat input of the right length.
    pub(crate) fn classify_slice(&self, x: &[f64], acts: Option<&[Option<ActQuant>]>) -> usize {
        argmax(&self.run(x, acts, None))
    }

    /// Core forward pass. `acts[i]` fake-quantizes the output of layer `i`;
    /// when `trace` is given, layer inputs and pre-quantization outputs are
    /// recorded for backprop.
    pub(crate) fn run(
        &self,
        x: &[f64],
        acts: Option<&[Option<ActQuant>]>,
        mut trace: Option<&mut Trace>,
    ) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.input_len());
        if let Some(t) = trace.as_deref_mut() {
            t.clear();
        }
        let mut cur = x.to_vec();
        for (i, spec) in self.layers.iter().enumerate() {
            let mut out = layer_forward(spec, self.params[i].as_ref(), &cur);
            let quant = acts.and_then(|a| a[i]);
            if let Some(t) = trace.as_deref_mut() {
                t.inputs.push(cur);
                t.raw.push(quant.map(|_| out.clone()));
            }
            if let Some(q) = quant {
                for v in out.iter_mut() {
                    *v = quantize_value(*v, q.bits, q.clip, q.mode);
                }
            }
            cur = out;
        }
        cur
    }
}

pub(crate) fn argmax_u64(v: &[u64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn split_input_shape(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [d] if d > 0 => Ok((d, 1)),
        [c, h, w] if c > 0 && h > 0 && h == w => Ok((c, h)),
        _ => Err(Error::Network(format!(
            "input shape must be [D] or [C, S, S], got {shape:?}"
        ))),
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn layer_forward(spec: &LayerSpec, params: Option<&LayerParams>, x: &[f64]) -> Vec<f64> {
    match spec.kind {
        LayerKind::Dense => {
            let p = params.expect("dense layer without parameters");
            let w = p.weight.data();
            let mut out = p.bias.data().to_vec();
            for (o, row) in out.iter_mut().zip(w.chunks_exact(spec.c_in)) {
                *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
            out
        }
        LayerKind::Conv2d => conv_forward(spec, params.expect("conv layer without parameters"), x),
        LayerKind::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
        LayerKind::AvgPool2d => {
            let (f, k, s, of) = (spec.feat, spec.kernel, spec.stride, spec.out_feat());
            let norm = 1.0 / (k * k) as f64;
            let mut out = vec![0.0; spec.c_out * of * of];
            for c in 0..spec.c_in {
                let plane = &x[c * f * f..(c + 1) * f * f];
                for oy in 0..of {
                    for ox in 0..of {
                        let mut acc = 0.0;
                        for ky in 0..k {
                            let row = (oy * s + ky) * f + ox * s;
                            acc += plane[row..row + k].iter().sum::<f64>();
                        }
                        out[(c * of + oy) * of + ox] = acc * norm;
                    }
                }
            }
            out
        }
        LayerKind::Flatten => x.to_vec(),
    }
}

fn conv_forward(spec: &LayerSpec, p: &LayerParams, x: &[f64]) -> Vec<f64> {
    let (f, k, s, of) = (spec.feat, spec.kernel, spec.stride, spec.out_feat());
    let w = p.weight.data();
    let b = p.bias.data();
    let mut out = vec![0.0; spec.c_out * of * of];
    let groups_in = if spec.depthwise { 1 } else { spec.c_in };
    for co in 0..spec.c_out {
        let out_plane = &mut out[co * of * of..(co + 1) * of * of];
        out_plane.fill(b[co]);
        for gi in 0..groups_in {
            let ci = if spec.depthwise { co } else { gi };
            let plane = &x[ci * f * f..(ci + 1) * f * f];
            let kern = &w[(co * groups_in + gi) * k * k..(co * groups_in + gi + 1) * k * k];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = kern[ky * k + kx];
                    for oy in 0..of {
                        let row = &plane[(oy * s + ky) * f + kx..];
                        let orow = &mut out_plane[oy * of..(oy + 1) * of];
                        if s == 1 {
                            for (o, v) in orow.iter_mut().zip(&row[..of]) {
                                *o += wv * v;
                            }
                        } else {
                            for (ox, o) in orow.iter_mut().enumerate() {
                                *o += wv * row[ox * s];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Incremental construction of a [`Network`] with seeded Kaiming-uniform init.
#[derive(Debug, Clone)]
pub struct NetworkBuilder {
    input_shape: Vec<usize>,
    channels: usize,
    feat: usize,
    layers: Vec<LayerSpec>,
}

impl NetworkBuilder {
    pub fn new(input_shape: Vec<usize>) -> Result<Self> {
        let (channels, feat) = split_input_shape(&input_shape)?;
        Ok(Self {
            input_shape,
            channels,
            feat,
            layers: Vec::new(),
        })
    }

    fn push(&mut self, kind: LayerKind, c_out: usize, kernel: usize, stride: usize, depthwise: bool) {
        let spec = LayerSpec::new(
            self.layers.len(),
            kind,
            self.channels,
            c_out,
            kernel,
            stride,
            self.feat,
            depthwise,
        );
        // Invalid geometry is reported by `build`.
        if spec.kernel <= spec.feat && spec.stride > 0 {
            self.feat = spec.out_feat();
        } else {
            self.feat = 0;
        }
        self.channels = c_out;
        self.layers.push(spec);
    }

    pub fn conv2d(mut self, c_out: usize, kernel: usize, stride: usize) -> Self {
        self.push(LayerKind::Conv2d, c_out, kernel, stride, false);
        self
    }

    pub fn depthwise(mut self, kernel: usize, stride: usize) -> Self {
        let c = self.channels;
        self.push(LayerKind::Conv2d, c, kernel, stride, true);
        self
    }

    pub fn relu(mut self) -> Self {
        let c = self.channels;
        self.push(LayerKind::Relu, c, 1, 1, false);
        self
    }

    pub fn avg_pool(mut self, kernel: usize, stride: usize) -> Self {
        let c = self.channels;
        self.push(LayerKind::AvgPool2d, c, kernel, stride, false);
        self
    }

    pub fn flatten(mut self) -> Self {
        let c = self.channels * self.feat * self.feat;
        self.push(LayerKind::Flatten, c, 1, 1, false);
        self
    }

    pub fn dense(mut self, out: usize) -> Self {
        self.push(LayerKind::Dense, out, 1, 1, false);
        self
    }

    pub fn build(self, num_classes: usize, seed: u64) -> Result<Network> {
        if let Some(bad) = self.layers.iter().find(|l| l.validate().is_err()) {
            bad.validate()?;
        }
        let mut rng = rng::stream(seed, Purpose::Init);
        let params = self
            .layers
            .iter()
            .map(|spec| {
                spec.kind.is_quantizable().then(|| {
                    let bound = (6.0 / spec.fan_in() as f64).sqrt();
                    let n = spec.weight_count();
                    let w = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                    LayerParams {
                        weight: Tensor::new(spec.weight_shape(), w).expect("weight shape"),
                        bias: Tensor::zeros(vec![spec.c_out]),
                    }
                })
            })
            .collect();
        Network::from_parts(self.input_shape, self.layers, params, num_classes)
    }
}

/// Shape of the default convolutional classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyConvConfig {
    pub in_channels: usize,
    pub image_size: usize,
    /// Output channels of each 3×3 conv block (2 to 4 blocks).
    pub channels: Vec<usize>,
    /// Width of the hidden dense layer; 0 means the head is a single dense layer.
    pub hidden: usize,
    pub num_classes: usize,
}

impl Default for TinyConvConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            image_size: 8,
            channels: vec![6, 8, 8],
            hidden: 16,
            num_classes: 3,
        }
    }
}

/// Conv blocks (3×3, stride 1, ReLU) followed by a dense head.
pub fn tiny_conv_net(cfg: &TinyConvConfig, seed: u64) -> Result<Network> {
    if !(2..=4).contains(&cfg.channels.len()) {
        return Err(Error::Network("TinyConvNet takes 2 to 4 conv blocks".into()));
    }
    let mut b = NetworkBuilder::new(vec![cfg.in_channels, cfg.image_size, cfg.image_size])?;
    for &c in &cfg.channels {
        b = b.conv2d(c, 3, 1).relu();
    }
    b = b.flatten();
    if cfg.hidden > 0 {
        b = b.dense(cfg.hidden).relu();
    }
    b.dense(cfg.num_classes).build(cfg.num_classes, seed)
}

/// Fully connected ReLU network.
pub fn mlp(input_len: usize, hidden: &[usize], num_classes: usize, seed: u64) -> Result<Network> {
    let mut b = NetworkBuilder::new(vec![input_len])?;
    for &h in hidden {
        b = b.dense(h).relu();
    }
    b.dense(num_classes).build(num_classes, seed)
}
