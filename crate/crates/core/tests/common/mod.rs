#![allow(dead_code)]

use arq_core::cost::action_to_bitwidth;
use arq_core::ddpg::{build_state, Agent, AgentConfig, AgentObservation, NetStats};
use arq_core::nn::{compute_gradients, cross_entropy, mlp, tiny_conv_net, Network, TinyConvConfig};
use arq_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Target `(w, a)` bits of the surrogate three-layer environment.
pub const SURROGATE_TARGET: [(u32, u32); 3] = [(6, 3), (2, 7), (5, 5)];

/// Runs the agent on a three-layer network whose reward is
/// `-Σ |b - b*|` over all six bit-widths, mirroring the search loop.
/// Returns the best policy seen and its reward.
pub fn surrogate_search(seed: u64, episodes: usize) -> (Vec<(u32, u32)>, f64) {
    let net = mlp(8, &[16, 12], 4, seed).unwrap();
    let stats = NetStats::new(&net);
    let mut agent = Agent::new(AgentConfig::default(), seed).unwrap();
    let mut best: Option<(f64, Vec<(u32, u32)>)> = None;
    for _ in 0..episodes {
        let mut bits = Vec::new();
        let mut steps: Vec<(AgentObservation, f64)> = Vec::new();
        let mut a_prev = 0.0;
        for k in net.quantizable_layers() {
            let mut pair = [0u32; 2];
            for (j, activation) in [false, true].into_iter().enumerate() {
                let obs = build_state(&net.layers()[k], activation, a_prev, &stats).unwrap();
                let a = agent.select_action(&obs);
                pair[j] = action_to_bitwidth(a, 2, 8).unwrap();
                steps.push((obs, a));
                a_prev = a;
            }
            bits.push((pair[0], pair[1]));
        }
        for (j, &(obs, a)) in steps.iter().enumerate() {
            match steps.get(j + 1) {
                Some(&(next, _)) => agent.buffer.push(obs, a, next, false),
                None => agent.buffer.push(obs, a, obs, true),
            }
        }
        let miss: u32 = bits
            .iter()
            .zip(SURROGATE_TARGET)
            .map(|(&(w, a), (tw, ta))| w.abs_diff(tw) + a.abs_diff(ta))
            .sum();
        let reward = -f64::from(miss);
        agent.finish_episode(reward).unwrap();
        if best.as_ref().is_none_or(|(r, _)| reward > *r) {
            best = Some((reward, bits));
        }
    }
    let (r, bits) = best.expect("at least one episode");
    (bits, r)
}

/// Every bit-width within one of the target.
pub fn near_target(bits: &[(u32, u32)]) -> bool {
    bits.iter()
        .zip(SURROGATE_TARGET)
        .all(|(&(w, a), (tw, ta))| w.abs_diff(tw) <= 1 && a.abs_diff(ta) <= 1)
}

/// `P(X >= k)` for `X ~ Bin(n, p)`, summed directly.
pub fn upper_tail(k: u64, n: u64, p: f64) -> f64 {
    let mut coef = 1.0f64;
    let mut total = 0.0;
    for j in 0..=n {
        if j > 0 {
            coef *= (n - j + 1) as f64 / j as f64;
        }
        if j >= k {
            total += coef * p.powi(j as i32) * (1.0 - p).powi((n - j) as i32);
        }
    }
    total
}

/// Smallest grid point `p = i·1e-7` with `P(X >= k; p) >= alpha`.
pub fn grid_lower(k: u64, n: u64, alpha: f64) -> f64 {
    let (mut lo, mut hi) = (0u64, 10_000_000u64);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if upper_tail(k, n, mid as f64 * 1e-7) >= alpha {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo as f64 * 1e-7
}

fn mean_loss(net: &Network, inputs: &[Tensor], labels: &[usize]) -> f64 {
    inputs
        .iter()
        .zip(labels)
        .map(|(x, &y)| cross_entropy(net.forward(x).unwrap().data(), y).0)
        .sum::<f64>()
        / inputs.len() as f64
}

fn gradient_setup(hidden: usize) -> (Network, Vec<Tensor>, Vec<usize>) {
    let cfg = TinyConvConfig {
        in_channels: 3,
        image_size: 6,
        channels: vec![12, 14],
        hidden,
        num_classes: 3,
    };
    let net = tiny_conv_net(&cfg, 17).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs: Vec<Tensor> = (0..3)
        .map(|_| Tensor::new(vec![3, 6, 6], (0..108).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
        .collect();
    (net, inputs, vec![0, 2, 1])
}

/// Worst relative error between analytic and central-difference gradients
/// over every parameter, and the number of parameters checked.
pub fn gradient_check(hidden: usize) -> (f64, usize) {
    let (net, inputs, labels) = gradient_setup(hidden);
    let (grads, loss) = compute_gradients(&net, &inputs, &labels).unwrap();
    assert!((loss - mean_loss(&net, &inputs, &labels)).abs() < 1e-12);
    let h = 1e-6;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for k in 0..net.layers().len() {
        let Some(g) = grads.layers[k].as_ref() else { continue };
        for (which, analytic) in [(0, g.weight.data()), (1, g.bias.data())] {
            for (i, &a) in analytic.iter().enumerate() {
                let eval = |delta: f64| {
                    let mut n = net.clone();
                    let p = n.params_mut()[k].as_mut().unwrap();
                    let t = if which == 0 { &mut p.weight } else { &mut p.bias };
                    t.data_mut()[i] += delta;
                    mean_loss(&n, &inputs, &labels)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let scale = a.abs().max(numeric.abs()).max(1e-5);
                let rel = (a - numeric).abs() / scale;
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    (worst, checked)
}

