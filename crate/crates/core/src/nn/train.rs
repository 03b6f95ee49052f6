use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::backprop::{accumulate_sample, Trace};
use super::{ActQuant, Gradients, Network, Sgd};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose, StreamRng};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Standard deviation of the Gaussian augmentation.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 30,
            batch_size: 32,
            noise_sigma: 0.25,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.epochs >= 1
            && self.batch_size >= 1
            && self.noise_sigma >= 0.0
            && self.noise_sigma.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training config {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub net: Network,
    /// Mean training loss of each epoch, on the augmented stream.
    pub epoch_loss: Vec<f64>,
}

/// How a training pass sees the network: plain float, or fake-quantized with
/// straight-through gradients.
pub(crate) trait TrainView {
    /// Network actually run forward/backward (e.g. with quantized weights).
    fn effective(&self, base: &Network) -> Network;
    fn acts(&self) -> Option<&[Option<ActQuant>]>;
    /// Zeroes gradient entries whose base weight sits outside its clip range.
    fn mask(&self, base: &Network, grads: &mut Gradients);
}

struct Float;

impl TrainView for Float {
    fn effective(&self, base: &Network) -> Network {
        base.clone()
    }
    fn acts(&self) -> Option<&[Option<ActQuant>]> {
        None
    }
    fn mask(&self, _: &Network, _: &mut Gradients) {}
}

/// One pass over `order` in mini-batches with fresh Gaussian noise per sample.
/// Returns the mean loss.
pub(crate) fn sgd_pass(
    base: &mut Network,
    view: &dyn TrainView,
    data: &Dataset,
    order: &[usize],
    sigma: f64,
    batch_size: usize,
    sgd: &mut Sgd,
    noise: &mut StreamRng,
) -> f64 {
    let mut trace = Trace::default();
    let mut x = vec![0.0; data.sample_len()];
    let mut total = 0.0;
    for batch in order.chunks(batch_size) {
        let eff = view.effective(base);
        let mut grads = Gradients::zeros_like(&eff);
        for &i in batch {
            x.copy_from_slice(data.sample(i));
            if sigma > 0.0 {
                for v in x.iter_mut() {
                    let e: f64 = noise.sample(StandardNormal);
                    *v += sigma * e;
                }
            }
            total += accumulate_sample(&eff, view.acts(), &x, data.label(i), &mut grads, &mut trace);
        }
        grads.scale(1.0 / batch.len() as f64);
        view.mask(base, &mut grads);
        sgd.step(base, &grads);
    }
    total / order.len() as f64
}

fn check_data(net: &Network, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Domain("empty dataset".into()));
    }
    if data.sample_shape() != net.input_shape() {
        return Err(Error::Shape {
            expected: net.input_shape().to_vec(),
            got: data.sample_shape().to_vec(),
        });
    }
    if data.num_classes() > net.num_classes() {
        return Err(Error::Domain("dataset has more classes than the network".into()));
    }
    Ok(())
}

/// Trains with Gaussian data augmentation: every sample gets fresh
/// `N(0, σ²I)` noise each epoch.
pub fn train_gaussian(mut net: Network, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    check_data(&net, data)?;
    let mut shuffle = rng::stream(cfg.seed, Purpose::Shuffle);
    let mut noise = rng::stream(cfg.seed, Purpose::Noise);
    let mut sgd = Sgd::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let loss = sgd_pass(&mut net, &Float, data, &order, cfg.noise_sigma, cfg.batch_size, &mut sgd, &mut noise);
        if !loss.is_finite() || !net.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        log::debug!("epoch {epoch}: loss {loss:.5}");
        epoch_loss.push(loss);
    }
    Ok(TrainReport { net, epoch_loss })
}

/// The seeded subset of `n1` sample indices used for fine-tuning.
pub(crate) fn fine_tune_subset(len: usize, n1: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng::stream(seed, Purpose::Subset));
    idx.truncate(n1);
    idx
}

pub(crate) fn fine_tune_with(
    net: &mut Network,
    view: &dyn TrainView,
    data: &Dataset,
    cfg: &TrainConfig,
    n1: usize,
) -> Result<()> {
    cfg.validate()?;
    check_data(net, data)?;
    if n1 > data.len() {
        return Err(Error::Domain(format!(
            "fine-tune subset {n1} exceeds dataset size {}",
            data.len()
        )));
    }
    if n1 == 0 {
        return Ok(());
    }
    let order = fine_tune_subset(data.len(), n1, cfg.seed);
    let mut noise = rng::stream(cfg.seed, Purpose::Noise);
    let mut sgd = Sgd::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    let loss = sgd_pass(net, view, data, &order, cfg.noise_sigma, cfg.batch_size, &mut sgd, &mut noise);
    if !loss.is_finite() || !net.is_finite() {
        return Err(Error::Divergence { epoch: 1 });
    }
    Ok(())
}

/// One Gaussian-augmented epoch over a seeded subset of `n1` samples.
/// Uses `cfg.learning_rate`, `cfg.noise_sigma` and `cfg.seed`; `cfg.epochs`
/// is ignored. The quantized counterpart is
/// [`QuantizedNetwork::fine_tune`](crate::quant::QuantizedNetwork::fine_tune).
pub fn fine_tune(net: &Network, data: &Dataset, cfg: &TrainConfig, n1: usize) -> Result<Network> {
    let mut out = net.clone();
    fine_tune_with(&mut out, &Float, data, cfg, n1)?;
    Ok(out)
}
