use super::{Gradients, LayerParams, Network};
use crate::tensor::Tensor;

fn zeros_like(net: &Network) -> Vec<Option<LayerParams>> {
    Gradients::zeros_like(net).layers
}

/// SGD with momentum; L2 weight decay is added to the gradient of weights
/// (biases are not decayed).
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<Vec<Option<LayerParams>>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: None,
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) {
        let velocity = self.velocity.get_or_insert_with(|| zeros_like(net));
        for ((p, g), m) in net
            .params_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(velocity.iter_mut())
        {
            let (Some(p), Some(g), Some(m)) = (p, g, m) else {
                continue;
            };
            sgd_update(&mut p.weight, &g.weight, &mut m.weight, self.lr, self.momentum, self.weight_decay);
            sgd_update(&mut p.bias, &g.bias, &mut m.bias, self.lr, self.momentum, 0.0);
        }
    }
}

fn sgd_update(p: &mut Tensor, g: &Tensor, m: &mut Tensor, lr: f64, momentum: f64, wd: f64) {
    for ((p, &g), m) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()) {
        *m = momentum * *m + (g + wd * *p);
        *p -= lr * *m;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// ADAM with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub(crate) t: u64,
    pub(crate) m: Vec<Option<LayerParams>>,
    pub(crate) v: Vec<Option<LayerParams>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, net: &Network) -> Self {
        Self {
            cfg,
            t: 0,
            m: zeros_like(net),
            v: zeros_like(net),
        }
    }

    /// One descent step along `grads`.
    pub fn step(&mut self, net: &mut Network, grads: &Gradients) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let layers = net.params_mut().iter_mut().zip(&grads.layers);
        for ((p, g), (m, v)) in layers.zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (Some(p), Some(g), Some(m), Some(v)) = (p, g, m, v) else {
                continue;
            };
            let pairs = [
                (&mut p.weight, &g.weight, &mut m.weight, &mut v.weight),
                (&mut p.bias, &g.bias, &mut m.bias, &mut v.bias),
            ];
            for (p, g, m, v) in pairs {
                let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
                for ((p, &g), (m, v)) in it {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetworkBuilder;

    fn scalar_net(w: f64) -> Network {
        let mut net = NetworkBuilder::new(vec![1]).unwrap().dense(1).build(1, 0).unwrap();
        net.params_mut()[0].as_mut().unwrap().weight.data_mut()[0] = w;
        net
    }

    fn grad(g: f64) -> Gradients {
        let net = scalar_net(0.0);
        let mut grads = Gradients::zeros_like(&net);
        grads.layers[0].as_mut().unwrap().weight.data_mut()[0] = g;
        grads
    }

    fn weight(net: &Network) -> f64 {
        net.params()[0].as_ref().unwrap().weight.data()[0]
    }

    #[test]
    fn plain_step() {
        let mut net = scalar_net(1.0);
        Sgd::new(1.0, 0.0, 0.0).step(&mut net, &grad(0.5));
        assert_eq!(weight(&net), 0.5);
    }

    #[test]
    fn pure_decay() {
        let mut net = scalar_net(1.0);
        Sgd::new(1.0, 0.0, 0.1).step(&mut net, &grad(0.0));
        assert!((weight(&net) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn two_step_momentum_closed_form() {
        let (lr, mu, wd, g, p0) = (0.1, 0.9, 0.01, 0.3, 2.0);
        let mut net = scalar_net(p0);
        let mut opt = Sgd::new(lr, mu, wd);
        opt.step(&mut net, &grad(g));
        let p1 = weight(&net);
        assert!((p1 - (p0 - lr * (g + wd * p0))).abs() < 1e-15);
        opt.step(&mut net, &grad(g));
        let step2 = p1 - weight(&net);
        let expected = lr * (1.9 * g + wd * (mu * p0 + p1));
        assert!((step2 - expected).abs() < 1e-14);
    }

    #[test]
    fn bias_is_not_decayed() {
        let mut net = scalar_net(1.0);
        net.params_mut()[0].as_mut().unwrap().bias.data_mut()[0] = 1.0;
        Sgd::new(1.0, 0.0, 0.5).step(&mut net, &grad(0.0));
        assert_eq!(net.params()[0].as_ref().unwrap().bias.data()[0], 1.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut net = scalar_net(1.0);
        let mut adam = Adam::new(AdamConfig::with_lr(0.01), &net);
        adam.step(&mut net, &grad(3.0));
        assert!((weight(&net) - 0.99).abs() < 1e-9);
    }
}
