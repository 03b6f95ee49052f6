//! Linear fake quantization, KL clip calibration and quantization policies.

use std::collections::HashMap;
use std::fmt;
use std::sync::Mutex;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::train::{fine_tune_with, TrainView};
use crate::nn::{ActQuant, Gradients, LayerKind, Network, TrainConfig, Trace};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

/// Bit-width pinned on the first and last quantizable layers during search.
pub const PINNED_BITS: u32 = 8;

/// Number of calibration samples used for activation clips.
pub const CALIBRATION_SAMPLES: usize = 256;

const HIST_BINS: usize = 2048;
const CLIP_CANDIDATES: usize = 128;
const KL_SMOOTHING: f64 = 1e-10;

/// Symmetric range `[-c, c]` for weights, unsigned `[0, c]` for activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QuantMode {
    Weight,
    Activation,
}

/// Step size `c / (2^(b-1) - 1)`.
pub fn step_size(bits: u32, clip: f64) -> f64 {
    clip / max_level(bits) as f64
}

fn max_level(bits: u32) -> u64 {
    (1u64 << (bits - 1)) - 1
}

/// Clips `v` to the mode's range, then rounds to the nearest multiple of the
/// step size.
#[inline]
pub fn quantize_value(v: f64, bits: u32, clip: f64, mode: QuantMode) -> f64 {
    let s = step_size(bits, clip);
    let lo = match mode {
        QuantMode::Weight => -clip,
        QuantMode::Activation => 0.0,
    };
    ((v.clamp(lo, clip) / s).round() * s).clamp(lo, clip)
}

pub fn quantize_tensor(t: &Tensor, bits: u32, clip: f64, mode: QuantMode) -> Tensor {
    let data = t.data().iter().map(|&v| quantize_value(v, bits, clip, mode)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub clip: f64,
    /// Set when the input carried no signal (all zero in the mode's range);
    /// `clip` is then 1.
    pub degenerate: bool,
}

/// Magnitudes relevant to `mode`, sorted ascending.
fn sorted_magnitudes(values: &[f64], mode: QuantMode) -> Vec<f64> {
    let mut mags: Vec<f64> = match mode {
        QuantMode::Weight => values.iter().map(|v| v.abs()).collect(),
        QuantMode::Activation => values.iter().map(|v| v.max(0.0)).collect(),
    };
    mags.sort_by(f64::total_cmp);
    mags
}

/// Chooses the clip value minimizing `KL(hist(q) || hist(v))` over 128
/// evenly spaced candidates in `(0, max|v|]`, with 2048-bin histograms over
/// `[0, max|v|]`.
///
/// A quantized level stands for its rounding cell, so the mass of each level
/// is spread evenly over the occupied reference bins that the cell overlaps.
/// Exact zeros are represented exactly and stay in the first bin. A level
/// whose cell covers no occupied bin (typically clipped outliers piling up
/// at `c`) keeps its mass in the bin of its value.
pub fn calibrate_clip(values: &[f64], bits: u32, mode: QuantMode) -> Calibration {
    calibrate_sorted(&sorted_magnitudes(values, mode), bits)
}

fn bin_of(x: f64, max: f64) -> usize {
    ((x / max * HIST_BINS as f64) as usize).min(HIST_BINS - 1)
}

/// Sample counts per quantization level for sorted magnitudes.
fn level_counts(mags: &[f64], levels: u64, level: impl Fn(f64) -> u64, counts: &mut [f64]) {
    counts.fill(0.0);
    let by_level = (levels as f64 + 1.0) * (mags.len() as f64).log2().max(1.0) < mags.len() as f64;
    if by_level {
        let mut start = 0;
        for (i, c) in counts.iter_mut().enumerate() {
            let end = start + mags[start..].partition_point(|&m| level(m) <= i as u64);
            *c = (end - start) as f64;
            start = end;
            if start == mags.len() {
                break;
            }
        }
    } else {
        for &m in mags {
            counts[level(m) as usize] += 1.0;
        }
    }
}

fn calibrate_sorted(mags: &[f64], bits: u32) -> Calibration {
    let max = mags.last().copied().unwrap_or(0.0);
    if max <= 0.0 {
        log::warn!("clip calibration on an all-zero tensor; using c = 1");
        return Calibration {
            clip: 1.0,
            degenerate: true,
        };
    }
    let n = mags.len() as f64;
    let mut counts = vec![0.0; HIST_BINS];
    for &m in mags {
        counts[bin_of(m, max)] += 1.0;
    }
    let reference: Vec<f64> = counts.iter().map(|c| c / n + KL_SMOOTHING).collect();
    let zeros = mags.partition_point(|&m| m <= 0.0);
    let positive = &mags[zeros..];
    // Bins holding positive values, and their running count.
    let mut occupied = counts.iter().map(|&c| c > 0.0).collect::<Vec<_>>();
    occupied[0] = counts[0] > zeros as f64;
    let mut occupied_before = vec![0u32; HIST_BINS + 1];
    for b in 0..HIST_BINS {
        occupied_before[b + 1] = occupied_before[b] + u32::from(occupied[b]);
    }

    let levels = max_level(bits);
    let mut mass = vec![0.0; levels as usize + 1];
    let mut density = vec![0.0; HIST_BINS + 1];
    let mut hist = vec![0.0; HIST_BINS];
    let mut best = (f64::INFINITY, max);
    for j in 1..=CLIP_CANDIDATES {
        let clip = max * j as f64 / CLIP_CANDIDATES as f64;
        let s = step_size(bits, clip);
        level_counts(positive, levels, |m| (m.min(clip) / s).round() as u64, &mut mass);

        density.fill(0.0);
        hist.fill(0.0);
        hist[0] = zeros as f64;
        for (i, &m) in mass.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let v = i as f64 * s;
            let lo = bin_of((v - 0.5 * s).max(0.0), max);
            let hi = bin_of((v + 0.5 * s).min(clip), max);
            let support = occupied_before[hi + 1] - occupied_before[lo];
            if support == 0 {
                hist[bin_of(v.min(clip), max)] += m;
            } else {
                let d = m / f64::from(support);
                density[lo] += d;
                density[hi + 1] -= d;
            }
        }
        let mut run = 0.0;
        for b in 0..HIST_BINS {
            run += density[b];
            if occupied[b] {
                hist[b] += run;
            }
        }

        let kl: f64 = hist
            .iter()
            .zip(&reference)
            .map(|(&h, &p)| {
                let q = h.max(0.0) / n + KL_SMOOTHING;
                q * (q / p).ln()
            })
            .sum();
        if kl < best.0 {
            best = (kl, clip);
        }
    }
    Calibration {
        clip: best.1,
        degenerate: false,
    }
}

/// Bit-widths for one quantizable layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PolicyEntry {
    pub layer: usize,
    pub w_bits: u32,
    pub a_bits: u32,
}

/// Per-layer `(weight bits, activation bits)` assignment.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct QuantPolicy {
    pub entries: Vec<PolicyEntry>,
    pub bit_min: u32,
    pub bit_max: u32,
}

impl QuantPolicy {
    /// Every quantizable layer of `net` at `bits`.
    pub fn uniform(net: &Network, bits: u32, bit_min: u32, bit_max: u32) -> Self {
        let entries = net
            .quantizable_layers()
            .into_iter()
            .map(|layer| PolicyEntry {
                layer,
                w_bits: bits,
                a_bits: bits,
            })
            .collect();
        Self {
            entries,
            bit_min,
            bit_max,
        }
    }

    /// Sets the first and last entries to 8/8.
    pub fn with_end_pins(mut self) -> Self {
        let n = self.entries.len();
        for i in [0, n.saturating_sub(1)] {
            if let Some(e) = self.entries.get_mut(i) {
                e.w_bits = PINNED_BITS;
                e.a_bits = PINNED_BITS;
            }
        }
        self
    }

    pub fn has_end_pins(&self) -> bool {
        match (self.entries.first(), self.entries.last()) {
            (Some(f), Some(l)) => [f.w_bits, f.a_bits, l.w_bits, l.a_bits].iter().all(|&b| b == PINNED_BITS),
            _ => false,
        }
    }

    /// Range checks only.
    pub fn validate(&self) -> Result<()> {
        if self.bit_min < 2 || self.bit_min > self.bit_max || self.bit_max > 32 {
            return Err(Error::Policy(format!(
                "bit range [{}, {}] invalid (need 2 <= b_min <= b_max <= 32)",
                self.bit_min, self.bit_max
            )));
        }
        for e in &self.entries {
            for b in [e.w_bits, e.a_bits] {
                if b < self.bit_min || b > self.bit_max {
                    return Err(Error::Policy(format!(
                        "layer {}: {b} bits outside [{}, {}]",
                        e.layer, self.bit_min, self.bit_max
                    )));
                }
            }
        }
        Ok(())
    }

    /// Range checks plus exact coverage of `net`'s dense/conv layers.
    pub fn validate_for(&self, net: &Network) -> Result<()> {
        self.validate()?;
        let quantizable = net.quantizable_layers();
        let listed: Vec<usize> = self.entries.iter().map(|e| e.layer).collect();
        if listed != quantizable {
            let mut bad: Vec<usize> = listed
                .iter()
                .filter(|l| !quantizable.contains(l))
                .chain(quantizable.iter().filter(|l| !listed.contains(l)))
                .copied()
                .collect();
            bad.sort_unstable();
            bad.dedup();
            if bad.is_empty() {
                // same set, wrong order or duplicates
                bad = listed;
            }
            return Err(Error::PolicyMismatch { layers: bad });
        }
        Ok(())
    }

    /// Entries as `k b_w b_a` joined by `;`.
    pub fn policy_string(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{} {} {}", e.layer, e.w_bits, e.a_bits))
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut bits = None;
        let mut entries = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = || Error::Format(format!("policy line {}: cannot parse {line:?}", no + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields[0] == "bits" {
                let [_, lo, hi] = fields[..] else { return Err(err()) };
                bits = Some((lo.parse().map_err(|_| err())?, hi.parse().map_err(|_| err())?));
                continue;
            }
            let [k, w, a] = fields[..] else { return Err(err()) };
            entries.push(PolicyEntry {
                layer: k.parse().map_err(|_| err())?,
                w_bits: w.parse().map_err(|_| err())?,
                a_bits: a.parse().map_err(|_| err())?,
            });
        }
        let (bit_min, bit_max) = bits.ok_or_else(|| Error::Format("policy file lacks a `bits` header".into()))?;
        let policy = Self {
            entries,
            bit_min,
            bit_max,
        };
        policy.validate()?;
        Ok(policy)
    }
}

impl fmt::Display for QuantPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# layer w_bits a_bits")?;
        writeln!(f, "bits {} {}", self.bit_min, self.bit_max)?;
        for e in &self.entries {
            writeln!(f, "{} {} {}", e.layer, e.w_bits, e.a_bits)?;
        }
        Ok(())
    }
}

/// Calibrated quantization parameters of one dense/conv layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerQuant {
    pub layer: usize,
    pub w_bits: u32,
    pub a_bits: u32,
    pub clip_w: f64,
    pub clip_a: f64,
    /// Layer whose output carries this layer's activation: the following
    /// ReLU if there is one, otherwise the layer itself (signed range).
    pub act_point: usize,
    pub act_mode: QuantMode,
}

impl LayerQuant {
    pub fn weight_step(&self) -> f64 {
        step_size(self.w_bits, self.clip_w)
    }

    pub fn act_step(&self) -> f64 {
        step_size(self.a_bits, self.clip_a)
    }
}

/// Where each quantizable layer's activation is observed and quantized.
fn activation_points(net: &Network) -> Vec<(usize, usize, QuantMode)> {
    let layers = net.layers();
    net.quantizable_layers()
        .into_iter()
        .map(|k| match layers.get(k + 1) {
            Some(next) if next.kind == LayerKind::Relu => (k, k + 1, QuantMode::Activation),
            _ => (k, k, QuantMode::Weight),
        })
        .collect()
}

/// Clip calibration for one network and calibration set, memoized per
/// `(layer, bits)`. Weight and activation statistics are gathered once.
pub struct Calibrator {
    weight_mags: HashMap<usize, Vec<f64>>,
    act_mags: HashMap<usize, Vec<f64>>,
    points: Vec<(usize, usize, QuantMode)>,
    memo: Mutex<HashMap<(usize, u32, bool), f64>>,
}

impl Calibrator {
    /// Runs up to 256 seeded calibration samples through the float network.
    pub fn new(net: &Network, calib: &Dataset) -> Result<Self> {
        if calib.is_empty() {
            return Err(Error::Domain("empty calibration set".into()));
        }
        if calib.sample_shape() != net.input_shape() {
            return Err(Error::Shape {
                expected: net.input_shape().to_vec(),
                got: calib.sample_shape().to_vec(),
            });
        }
        let points = activation_points(net);
        let mut weight_mags = HashMap::new();
        for &(k, _, _) in &points {
            let w = net.params()[k].as_ref().expect("quantizable layer has params");
            weight_mags.insert(k, sorted_magnitudes(w.weight.data(), QuantMode::Weight));
        }
        let mut idx: Vec<usize> = (0..calib.len()).collect();
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng::stream(0, Purpose::Calibration));
        idx.truncate(CALIBRATION_SAMPLES);

        let mut observed: HashMap<usize, Vec<f64>> = HashMap::new();
        let mut trace = Trace::default();
        for &i in &idx {
            let logits = net.run(calib.sample(i), None, Some(&mut trace));
            for &(k, point, _) in &points {
                // The output of `point` is the input of the next layer.
                let out = trace.inputs.get(point + 1).unwrap_or(&logits);
                observed.entry(k).or_default().extend_from_slice(out);
            }
        }
        let act_mags = points
            .iter()
            .map(|&(k, _, mode)| (k, sorted_magnitudes(&observed[&k], mode)))
            .collect();
        Ok(Self {
            weight_mags,
            act_mags,
            points,
            memo: Mutex::new(HashMap::new()),
        })
    }

    fn clip(&self, layer: usize, bits: u32, weights: bool) -> f64 {
        let key = (layer, bits, weights);
        if let Some(&c) = self.memo.lock().expect("memo lock").get(&key) {
            return c;
        }
        let mags = if weights { &self.weight_mags[&layer] } else { &self.act_mags[&layer] };
        let c = calibrate_sorted(mags, bits).clip;
        self.memo.lock().expect("memo lock").insert(key, c);
        c
    }

    /// Calibrates every layer of `policy` and builds the fake-quantized network.
    pub fn apply(&self, net: &Network, policy: &QuantPolicy) -> Result<QuantizedNetwork> {
        self.build(net, policy, |k, bits, weights| self.clip(k, bits, weights))
    }

    /// Like [`apply`](Self::apply) but with every clip set to `scale` times
    /// the largest observed magnitude instead of the KL choice.
    pub fn apply_generous(&self, net: &Network, policy: &QuantPolicy, scale: f64) -> Result<QuantizedNetwork> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Domain(format!("clip scale must be positive, got {scale}")));
        }
        self.build(net, policy, |k, _, weights| {
            let mags = if weights { &self.weight_mags[&k] } else { &self.act_mags[&k] };
            match mags.last() {
                Some(&m) if m > 0.0 => scale * m,
                _ => 1.0,
            }
        })
    }

    fn build(&self, net: &Network, policy: &QuantPolicy, clip: impl Fn(usize, u32, bool) -> f64) -> Result<QuantizedNetwork> {
        policy.validate_for(net)?;
        let qparams: Vec<LayerQuant> = policy
            .entries
            .iter()
            .zip(&self.points)
            .map(|(e, &(k, act_point, act_mode))| LayerQuant {
                layer: k,
                w_bits: e.w_bits,
                a_bits: e.a_bits,
                clip_w: clip(k, e.w_bits, true),
                clip_a: clip(k, e.a_bits, false),
                act_point,
                act_mode,
            })
            .collect();
        Ok(QuantizedNetwork::assemble(net.clone(), policy.clone(), qparams))
    }
}

/// Calibrates clips from `net`'s weights and from activations observed on
/// `calib`, returning the fake-quantized network. The float weights in
/// `base` are left untouched.
pub fn apply_policy(net: &Network, policy: &QuantPolicy, calib: &Dataset) -> Result<QuantizedNetwork> {
    policy.validate_for(net)?;
    Calibrator::new(net, calib)?.apply(net, policy)
}

/// A network executed with quantized weights and activations.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedNetwork {
    base: Network,
    policy: QuantPolicy,
    qparams: Vec<LayerQuant>,
    effective: Network,
    acts: Vec<Option<ActQuant>>,
}

impl QuantizedNetwork {
    fn assemble(base: Network, policy: QuantPolicy, qparams: Vec<LayerQuant>) -> Self {
        let effective = quantized_weights(&base, &qparams);
        let mut acts = vec![None; base.layers().len()];
        for q in &qparams {
            acts[q.act_point] = Some(ActQuant {
                bits: q.a_bits,
                clip: q.clip_a,
                mode: q.act_mode,
            });
        }
        Self {
            base,
            policy,
            qparams,
            effective,
            acts,
        }
    }

    pub fn base(&self) -> &Network {
        &self.base
    }

    pub fn policy(&self) -> &QuantPolicy {
        &self.policy
    }

    pub fn qparams(&self) -> &[LayerQuant] {
        &self.qparams
    }

    /// The base network with fake-quantized weights.
    pub fn quantized_weights(&self) -> &Network {
        &self.effective
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.base.check_input(x)?;
        Ok(Tensor::vector(self.effective.run(x.data(), Some(&self.acts), None)))
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        self.base.check_input(x)?;
        Ok(self.classify_slice(x.data()))
    }

    pub(crate) fn classify_slice(&self, x: &[f64]) -> usize {
        self.effective.classify_slice(x, Some(&self.acts))
    }

    /// One Gaussian-augmented epoch over `n1` seeded samples, with
    /// straight-through gradients for both quantizers. Clips are recalibrated
    /// on `calib` afterwards when `recalibrate` is set, otherwise the old
    /// clips are reapplied to the updated weights.
    pub fn fine_tune(
        &self,
        data: &Dataset,
        cfg: &TrainConfig,
        n1: usize,
        calib: &Dataset,
        recalibrate: bool,
    ) -> Result<QuantizedNetwork> {
        if n1 == 0 {
            return Ok(self.clone());
        }
        let mut base = self.base.clone();
        fine_tune_with(&mut base, self, data, cfg, n1)?;
        if recalibrate {
            Calibrator::new(&base, calib)?.apply(&base, &self.policy)
        } else {
            Ok(Self::assemble(base, self.policy.clone(), self.qparams.clone()))
        }
    }
}

impl TrainView for QuantizedNetwork {
    fn effective(&self, base: &Network) -> Network {
        quantized_weights(base, &self.qparams)
    }

    fn acts(&self) -> Option<&[Option<ActQuant>]> {
        Some(&self.acts)
    }

    fn mask(&self, base: &Network, grads: &mut Gradients) {
        for q in &self.qparams {
            let (Some(w), Some(g)) = (base.params()[q.layer].as_ref(), grads.layers[q.layer].as_mut()) else {
                continue;
            };
            for (g, &v) in g.weight.data_mut().iter_mut().zip(w.weight.data()) {
                if v.abs() > q.clip_w {
                    *g = 0.0;
                }
            }
        }
    }
}

fn quantized_weights(base: &Network, qparams: &[LayerQuant]) -> Network {
    let mut eff = base.clone();
    for q in qparams {
        if let Some(p) = eff.params_mut()[q.layer].as_mut() {
            p.weight = quantize_tensor(&p.weight, q.w_bits, q.clip_w, QuantMode::Weight);
        }
    }
    eff
}
