//! BitOPs and model-size accounting, the action-to-bitwidth map and budget
//! enforcement.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Network};
use crate::quant::QuantPolicy;

/// Maps a continuous action in `[0, 1]` to a bit-width:
/// `floor(b_min - 0.5 + a·(b_max - b_min + 1) + 0.5)`, clamped to
/// `[b_min, b_max]`.
pub fn action_to_bitwidth(a: f64, bit_min: u32, bit_max: u32) -> Result<u32> {
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::Domain(format!("action {a} outside [0, 1]")));
    }
    if bit_min > bit_max {
        return Err(Error::Domain(format!("empty bit range [{bit_min}, {bit_max}]")));
    }
    let x = bit_min as f64 - 0.5 + a * (bit_max - bit_min + 1) as f64;
    let b = (x + 0.5).floor() as i64;
    Ok(b.clamp(bit_min as i64, bit_max as i64) as u32)
}

/// `|k| · s_feat² / stride²` (integer division) for dense/conv layers, where
/// `|k|` is the weight count and `s_feat` the input map side. Dense layers
/// have `s_feat = stride = 1`.
pub fn spatial_macs(layer: &LayerSpec) -> Option<u128> {
    if !layer.kind.is_quantizable() {
        return None;
    }
    let f = layer.feat as u128;
    let s = layer.stride as u128;
    Some(layer.weight_count() as u128 * f * f / (s * s))
}

/// `b_w · b_a · |k| · w · h / s²`; `None` for layers that are not quantizable.
pub fn layer_bops(layer: &LayerSpec, w_bits: u32, a_bits: u32) -> Option<u128> {
    spatial_macs(layer).map(|m| w_bits as u128 * a_bits as u128 * m)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub layer: usize,
    pub w_bits: u32,
    pub a_bits: u32,
    pub bops: u128,
    pub size_bits: u128,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub total_bops: u128,
    pub total_size_bits: u128,
    pub per_layer: Vec<LayerCost>,
}

impl CostReport {
    /// `layer,k,b_w,b_a,bops,size_bits`, one row per quantizable layer in
    /// order; `layer` is the row position, `k` the network layer index.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,k,b_w,b_a,bops,size_bits\n");
        for (i, l) in self.per_layer.iter().enumerate() {
            let _ = writeln!(out, "{i},{},{},{},{},{}", l.layer, l.w_bits, l.a_bits, l.bops, l.size_bits);
        }
        out
    }
}

pub fn policy_cost(net: &Network, policy: &QuantPolicy) -> Result<CostReport> {
    policy.validate_for(net)?;
    let per_layer: Vec<LayerCost> = policy
        .entries
        .iter()
        .map(|e| {
            let spec = &net.layers()[e.layer];
            LayerCost {
                layer: e.layer,
                w_bits: e.w_bits,
                a_bits: e.a_bits,
                bops: layer_bops(spec, e.w_bits, e.a_bits).expect("validated quantizable"),
                size_bits: e.w_bits as u128 * spec.weight_count() as u128,
            }
        })
        .collect();
    Ok(CostReport {
        total_bops: per_layer.iter().map(|l| l.bops).sum(),
        total_size_bits: per_layer.iter().map(|l| l.size_bits).sum(),
        per_layer,
    })
}

/// Cost with every non-pinned entry at `bit_min`; the first and last entries
/// keep their bits.
pub fn min_achievable_bops(net: &Network, policy: &QuantPolicy) -> Result<u128> {
    let mut floor = policy.clone();
    let n = floor.entries.len();
    for (i, e) in floor.entries.iter_mut().enumerate() {
        if i != 0 && i + 1 != n {
            e.w_bits = policy.bit_min;
            e.a_bits = policy.bit_min;
        }
    }
    Ok(policy_cost(net, &floor)?.total_bops)
}

/// Lowers bit-widths until the BitOPs fit `budget`.
///
/// Scans from the last reducible layer to the first, decrementing the
/// weight bits and then the activation bits of each layer by one and
/// re-checking after every decrement; wraps around for further passes. The
/// first and last entries are never reduced.
pub fn enforce_budget(net: &Network, policy: &QuantPolicy, budget: u128) -> Result<QuantPolicy> {
    let mut cost = policy_cost(net, policy)?.total_bops;
    if cost <= budget {
        return Ok(policy.clone());
    }
    let min_cost = min_achievable_bops(net, policy)?;
    if min_cost > budget {
        return Err(Error::Unsatisfiable { min_cost });
    }
    let mut out = policy.clone();
    let n = out.entries.len();
    let macs: Vec<u128> = out
        .entries
        .iter()
        .map(|e| spatial_macs(&net.layers()[e.layer]).expect("quantizable"))
        .collect();
    loop {
        for i in (1..n.saturating_sub(1)).rev() {
            for weights in [true, false] {
                let e = &mut out.entries[i];
                let (bits, other) = if weights {
                    (&mut e.w_bits, e.a_bits)
                } else {
                    (&mut e.a_bits, e.w_bits)
                };
                if *bits > out.bit_min {
                    *bits -= 1;
                    cost -= other as u128 * macs[i];
                    if cost <= budget {
                        return Ok(out);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{tiny_conv_net, LayerKind, NetworkBuilder, TinyConvConfig};

    #[test]
    fn action_map_examples() {
        assert_eq!(action_to_bitwidth(0.0, 2, 8).unwrap(), 2);
        assert_eq!(action_to_bitwidth(0.5, 2, 8).unwrap(), 5);
        assert_eq!(action_to_bitwidth(1.0, 2, 8).unwrap(), 8);
        assert!(action_to_bitwidth(1.01, 2, 8).is_err());
        assert!(action_to_bitwidth(-0.1, 2, 8).is_err());
    }

    #[test]
    fn dense_bops() {
        let net = NetworkBuilder::new(vec![100]).unwrap().dense(10).build(10, 0).unwrap();
        assert_eq!(net.layers()[0].weight_count(), 1000);
        assert_eq!(layer_bops(&net.layers()[0], 8, 8), Some(64_000));
    }

    #[test]
    fn conv_bops() {
        let net = NetworkBuilder::new(vec![16, 8, 8])
            .unwrap()
            .conv2d(32, 3, 1)
            .flatten()
            .dense(2)
            .build(2, 0)
            .unwrap();
        let conv = &net.layers()[0];
        assert_eq!(conv.n_params, 4640);
        assert_eq!(conv.weight_count(), 4608);
        assert_eq!(layer_bops(conv, 4, 4), Some(4_718_592));
        assert_eq!(layer_bops(&net.layers()[1], 4, 4), None);
        assert_eq!(net.layers()[1].kind, LayerKind::Flatten);
    }

    #[test]
    fn uniform_ratio_and_size() {
        let net = tiny_conv_net(&TinyConvConfig::default(), 0).unwrap();
        let c8 = policy_cost(&net, &QuantPolicy::uniform(&net, 8, 2, 8)).unwrap();
        let c4 = policy_cost(&net, &QuantPolicy::uniform(&net, 4, 2, 8)).unwrap();
        assert_eq!(c8.total_bops, 4 * c4.total_bops);
        let weights: usize = net.layers().iter().map(|l| l.weight_count()).sum();
        assert_eq!(c8.total_size_bits, 8 * weights as u128);
        let csv = c8.to_csv();
        assert!(csv.starts_with("layer,k,b_w,b_a,bops,size_bits\n0,0,8,8,"));
        assert_eq!(csv.lines().count(), 6);
    }

    #[test]
    fn under_budget_is_unchanged() {
        let net = tiny_conv_net(&TinyConvConfig::default(), 0).unwrap();
        let p = QuantPolicy::uniform(&net, 6, 2, 8).with_end_pins();
        let c = policy_cost(&net, &p).unwrap().total_bops;
        assert_eq!(enforce_budget(&net, &p, c).unwrap(), p);
    }

    #[test]
    fn one_step_over_budget() {
        let net = NetworkBuilder::new(vec![4])
            .unwrap()
            .dense(4)
            .relu()
            .dense(4)
            .relu()
            .dense(2)
            .build(2, 0)
            .unwrap();
        let p = QuantPolicy::uniform(&net, 8, 2, 8);
        let c = policy_cost(&net, &p).unwrap().total_bops;
        // One weight-bit of the middle layer is worth 8 * 16 BOPs.
        let out = enforce_budget(&net, &p, c - 1).unwrap();
        assert_eq!(out.entries[1].w_bits, 7);
        assert_eq!(out.entries[1].a_bits, 8);
        assert_eq!(out.entries[0], p.entries[0]);
        assert_eq!(out.entries[2], p.entries[2]);
    }

    #[test]
    fn unsatisfiable_reports_minimum() {
        let net = tiny_conv_net(&TinyConvConfig::default(), 0).unwrap();
        let p = QuantPolicy::uniform(&net, 8, 2, 8).with_end_pins();
        let min = min_achievable_bops(&net, &p).unwrap();
        match enforce_budget(&net, &p, min - 1) {
            Err(Error::Unsatisfiable { min_cost }) => assert_eq!(min_cost, min),
            other => panic!("unexpected {other:?}"),
        }
        let out = enforce_budget(&net, &p, min).unwrap();
        assert!(out.entries[1..4].iter().all(|e| e.w_bits == 2 && e.a_bits == 2));
    }
}
