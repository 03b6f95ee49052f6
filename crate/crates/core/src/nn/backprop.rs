use super::{ActQuant, LayerKind, LayerParams, LayerSpec, Network};
use crate::error::{Error, Result};
use crate::quant::QuantMode;
use crate::tensor::Tensor;

/// Per-layer record of a forward pass, consumed by [`backward`].
#[derive(Debug, Default, Clone)]
pub(crate) struct Trace {
    pub(crate) inputs: Vec<Vec<f64>>,
    /// Output before fake quantization, kept only at quantization points.
    pub(crate) raw: Vec<Option<Vec<f64>>>,
}

impl Trace {
    pub(crate) fn clear(&mut self) {
        self.inputs.clear();
        self.raw.clear();
    }
}

/// Gradients laid out like [`Network::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<LayerParams>>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        let layers = net
            .params()
            .iter()
            .map(|p| {
                p.as_ref().map(|p| LayerParams {
                    weight: Tensor::zeros(p.weight.shape().to_vec()),
                    bias: Tensor::zeros(p.bias.shape().to_vec()),
                })
            })
            .collect();
        Self { layers }
    }

    pub fn scale(&mut self, factor: f64) {
        for p in self.layers.iter_mut().flatten() {
            p.weight.data_mut().iter_mut().for_each(|v| *v *= factor);
            p.bias.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .flatten()
            .all(|p| p.weight.is_finite() && p.bias.is_finite())
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax cross-entropy of one sample and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    (lse - logits[label], grad)
}

/// Mean cross-entropy loss over a batch and its parameter gradients.
pub fn compute_gradients(net: &Network, inputs: &[Tensor], labels: &[usize]) -> Result<(Gradients, f64)> {
    if inputs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if inputs.len() != labels.len() {
        return Err(Error::Domain("inputs and labels differ in length".into()));
    }
    let mut grads = Gradients::zeros_like(net);
    let mut trace = Trace::default();
    let mut loss = 0.0;
    for (x, &y) in inputs.iter().zip(labels) {
        net.check_input(x)?;
        if y >= net.num_classes() {
            return Err(Error::Domain(format!(
                "label {y} outside [0, {})",
                net.num_classes()
            )));
        }
        loss += accumulate_sample(net, None, x.data(), y, &mut grads, &mut trace);
    }
    let inv = 1.0 / inputs.len() as f64;
    grads.scale(inv);
    Ok((grads, loss * inv))
}

/// Forward + backward for one labelled sample; adds (unscaled) gradients.
pub(crate) fn accumulate_sample(
    net: &Network,
    acts: Option<&[Option<ActQuant>]>,
    x: &[f64],
    label: usize,
    grads: &mut Gradients,
    trace: &mut Trace,
) -> f64 {
    let logits = net.run(x, acts, Some(trace));
    let (loss, dlogits) = cross_entropy(&logits, label);
    backward(net, acts, trace, dlogits, grads);
    loss
}

/// Backpropagates `dout` (gradient w.r.t. the network output) through a
/// recorded pass, accumulating into `grads`. Fake quantization of
/// activations uses the straight-through estimator. Returns the gradient
/// w.r.t. the network input.
pub(crate) fn backward(
    net: &Network,
    acts: Option<&[Option<ActQuant>]>,
    trace: &Trace,
    mut grad: Vec<f64>,
    grads: &mut Gradients,
) -> Vec<f64> {
    for (i, spec) in net.layers().iter().enumerate().rev() {
        if let (Some(q), Some(raw)) = (acts.and_then(|a| a[i]), trace.raw[i].as_ref()) {
            let lo = match q.mode {
                QuantMode::Weight => -q.clip,
                QuantMode::Activation => 0.0,
            };
            for (g, &v) in grad.iter_mut().zip(raw) {
                if v < lo || v > q.clip {
                    *g = 0.0;
                }
            }
        }
        let x = &trace.inputs[i];
        grad = layer_backward(spec, net.params()[i].as_ref(), grads.layers[i].as_mut(), x, &grad);
    }
    grad
}

fn layer_backward(
    spec: &LayerSpec,
    params: Option<&LayerParams>,
    gparams: Option<&mut LayerParams>,
    x: &[f64],
    gout: &[f64],
) -> Vec<f64> {
    match spec.kind {
        LayerKind::Dense => {
            let p = params.expect("dense params");
            let gp = gparams.expect("dense grads");
            let w = p.weight.data();
            let n_in = spec.c_in;
            let mut gin = vec![0.0; n_in];
            let gw = gp.weight.data_mut();
            for (o, &g) in gout.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let row = &w[o * n_in..(o + 1) * n_in];
                let grow = &mut gw[o * n_in..(o + 1) * n_in];
                for j in 0..n_in {
                    grow[j] += g * x[j];
                    gin[j] += g * row[j];
                }
            }
            for (b, g) in gp.bias.data_mut().iter_mut().zip(gout) {
                *b += g;
            }
            gin
        }
        LayerKind::Conv2d => conv_backward(spec, params.expect("conv params"), gparams.expect("conv grads"), x, gout),
        LayerKind::Relu => x
            .iter()
            .zip(gout)
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
        LayerKind::AvgPool2d => {
            let (f, k, s, of) = (spec.feat, spec.kernel, spec.stride, spec.out_feat());
            let norm = 1.0 / (k * k) as f64;
            let mut gin = vec![0.0; x.len()];
            for c in 0..spec.c_in {
                for oy in 0..of {
                    for ox in 0..of {
                        let g = gout[(c * of + oy) * of + ox] * norm;
                        for ky in 0..k {
                            for kx in 0..k {
                                gin[c * f * f + (oy * s + ky) * f + ox * s + kx] += g;
                            }
                        }
                    }
                }
            }
            gin
        }
        LayerKind::Flatten => gout.to_vec(),
    }
}

fn conv_backward(spec: &LayerSpec, p: &LayerParams, gp: &mut LayerParams, x: &[f64], gout: &[f64]) -> Vec<f64> {
    let (f, k, s, of) = (spec.feat, spec.kernel, spec.stride, spec.out_feat());
    let w = p.weight.data();
    let groups_in = if spec.depthwise { 1 } else { spec.c_in };
    let mut gin = vec![0.0; x.len()];
    {
        let gb = gp.bias.data_mut();
        for co in 0..spec.c_out {
            gb[co] += gout[co * of * of..(co + 1) * of * of].iter().sum::<f64>();
        }
    }
    let gw = gp.weight.data_mut();
    for co in 0..spec.c_out {
        let gplane = &gout[co * of * of..(co + 1) * of * of];
        for gi in 0..groups_in {
            let ci = if spec.depthwise { co } else { gi };
            let base = ci * f * f;
            let kbase = (co * groups_in + gi) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[kbase + ky * k + kx];
                    let mut acc = 0.0;
                    for oy in 0..of {
                        for ox in 0..of {
                            let g = gplane[oy * of + ox];
                            let idx = base + (oy * s + ky) * f + ox * s + kx;
                            acc += g * x[idx];
                            gin[idx] += g * wv;
                        }
                    }
                    gw[kbase + ky * k + kx] += acc;
                }
            }
        }
    }
    gin
}
