//! Run configuration: TOML with one section per concern, every key optional.

use std::path::Path;

use serde::{Deserialize, Serialize};

use arq_core::data::DataConfig;
use arq_core::ddpg::AgentConfig;
use arq_core::nn::{TinyConvConfig, TrainConfig};
use arq_core::search::{Budget, RewardMode, SearchConfig};

use crate::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for every random stream of the run; `ARQ_SEED` overrides it.
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub certify: CertifySection,
    pub search: SearchSection,
    pub agent: AgentSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            certify: CertifySection::default(),
            search: SearchSection::default(),
            agent: AgentSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub num_classes: usize,
    pub channels: usize,
    pub image_size: usize,
    pub per_class: usize,
    /// Prototype-to-boundary distance in units of `noise_std`.
    pub margin: f64,
    pub noise_std: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DataConfig::default();
        Self {
            num_classes: d.num_classes,
            channels: d.channels,
            image_size: d.image_size,
            per_class: d.per_class,
            margin: d.margin,
            noise_std: d.noise_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Output channels of the 3x3 conv blocks (2 to 4 entries).
    pub conv_channels: Vec<usize>,
    pub hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = TinyConvConfig::default();
        Self {
            conv_channels: m.channels,
            hidden: m.hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub noise_sigma: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            batch_size: t.batch_size,
            noise_sigma: t.noise_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifySection {
    pub sigma: f64,
    pub n: usize,
    pub alpha: f64,
    /// Inputs to certify from the start of the split; 0 means all.
    pub num_inputs: usize,
    /// `train`, `cert` or `eval` when `--data` is a dataset directory.
    pub split: String,
    /// Estimation predictions kept per input in the cache.
    pub trace_len: usize,
}

impl Default for CertifySection {
    fn default() -> Self {
        Self {
            sigma: 0.25,
            n: 4000,
            alpha: 0.001,
            num_inputs: 0,
            split: "cert".into(),
            trace_len: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub sigma: f64,
    pub n0: usize,
    pub n: usize,
    pub n1: usize,
    /// Absolute BitOPs budget; 0 means use `budget_uniform_bits`.
    pub budget_bops: u64,
    /// Budget as the cost of the uniform policy at this width (8-bit ends).
    pub budget_uniform_bits: u32,
    pub episodes: usize,
    pub bit_min: u32,
    pub bit_max: u32,
    pub alpha: f64,
    pub alpha_zeta: f64,
    pub num_inputs: usize,
    /// `acr`, `val`, `acc`, `acc_at_r` or `acr_plus_acc`.
    pub reward: String,
    pub reward_radius: f64,
    pub recalibrate: bool,
    pub finetune_learning_rate: f64,
    pub finetune_momentum: f64,
    pub finetune_weight_decay: f64,
    pub finetune_batch_size: usize,
}

impl Default for SearchSection {
    fn default() -> Self {
        let s = SearchConfig::default();
        Self {
            sigma: s.sigma,
            n0: s.n0,
            n: s.n,
            n1: s.n1,
            budget_bops: 0,
            budget_uniform_bits: 4,
            episodes: s.episodes,
            bit_min: s.bit_min,
            bit_max: s.bit_max,
            alpha: s.alpha,
            alpha_zeta: s.alpha_zeta,
            num_inputs: s.num_inputs,
            reward: s.reward.name().into(),
            reward_radius: s.reward_radius,
            recalibrate: s.recalibrate,
            finetune_learning_rate: s.fine_tune.learning_rate,
            finetune_momentum: s.fine_tune.momentum,
            finetune_weight_decay: s.fine_tune.weight_decay,
            finetune_batch_size: s.fine_tune.batch_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentSection {
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub explore_std0: f64,
    pub explore_decay: f64,
    pub tau: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub warmup_episodes: usize,
    pub hidden: usize,
    pub buffer_capacity: usize,
}

impl Default for AgentSection {
    fn default() -> Self {
        let a = AgentConfig::default();
        Self {
            actor_lr: a.actor_lr,
            critic_lr: a.critic_lr,
            beta1: a.beta1,
            beta2: a.beta2,
            explore_std0: a.explore_std0,
            explore_decay: a.explore_decay,
            tau: a.tau,
            gamma: a.gamma,
            batch_size: a.batch_size,
            warmup_episodes: a.warmup_episodes,
            hidden: a.hidden,
            buffer_capacity: a.buffer_capacity,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, Failure> {
        toml::from_str(text).map_err(|e| Failure::Config(format!("config: {}", e.message())))
    }

    /// Reads `path` if given, then applies `ARQ_SEED` and `seed` in that order.
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self, Failure> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text)?
            }
            None => Self::default(),
        };
        if let Ok(v) = std::env::var("ARQ_SEED") {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| Failure::Config(format!("ARQ_SEED must be an unsigned integer, got {v:?}")))?;
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn data_config(&self) -> DataConfig {
        let d = &self.data;
        DataConfig {
            num_classes: d.num_classes,
            channels: d.channels,
            image_size: d.image_size,
            per_class: d.per_class,
            margin: d.margin,
            noise_std: d.noise_std,
            seed: self.seed,
        }
    }

    pub fn model_config(&self) -> TinyConvConfig {
        TinyConvConfig {
            in_channels: self.data.channels,
            image_size: self.data.image_size,
            channels: self.model.conv_channels.clone(),
            hidden: self.model.hidden,
            num_classes: self.data.num_classes,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            batch_size: t.batch_size,
            noise_sigma: t.noise_sigma,
            seed: self.seed,
        }
    }

    pub fn search_config(&self) -> Result<SearchConfig, Failure> {
        let s = &self.search;
        let a = &self.agent;
        let reward: RewardMode = s.reward.parse().map_err(Failure::from)?;
        let budget = if s.budget_bops > 0 {
            Budget::Bops(u128::from(s.budget_bops))
        } else {
            Budget::UniformBits(s.budget_uniform_bits)
        };
        let cfg = SearchConfig {
            sigma: s.sigma,
            n0: s.n0,
            n: s.n,
            n1: s.n1,
            budget,
            episodes: s.episodes,
            bit_min: s.bit_min,
            bit_max: s.bit_max,
            alpha: s.alpha,
            alpha_zeta: s.alpha_zeta,
            num_inputs: s.num_inputs,
            seed: self.seed,
            reward,
            reward_radius: s.reward_radius,
            recalibrate: s.recalibrate,
            fine_tune: TrainConfig {
                learning_rate: s.finetune_learning_rate,
                momentum: s.finetune_momentum,
                weight_decay: s.finetune_weight_decay,
                epochs: 1,
                batch_size: s.finetune_batch_size,
                noise_sigma: s.sigma,
                seed: self.seed,
            },
            agent: AgentConfig {
                actor_lr: a.actor_lr,
                critic_lr: a.critic_lr,
                beta1: a.beta1,
                beta2: a.beta2,
                explore_std0: a.explore_std0,
                explore_decay: a.explore_decay,
                tau: a.tau,
                gamma: a.gamma,
                batch_size: a.batch_size,
                warmup_episodes: a.warmup_episodes,
                hidden: a.hidden,
                buffer_capacity: a.buffer_capacity,
            },
        };
        cfg.validate().map_err(Failure::from)?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(RunConfig::parse("").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::parse("sede = 3"), Err(Failure::Config(_))));
        assert!(matches!(RunConfig::parse("[search]\nepisode = 3"), Err(Failure::Config(_))));
        assert!(matches!(RunConfig::parse("[nope]\n"), Err(Failure::Config(_))));
    }

    #[test]
    fn sections_apply() {
        let cfg = RunConfig::parse("seed = 4\n[search]\nepisodes = 0\nreward = \"acc\"\n").unwrap();
        let s = cfg.search_config().unwrap();
        assert_eq!((s.seed, s.episodes, s.reward), (4, 0, RewardMode::Acc));
        let bad = RunConfig::parse("[search]\nreward = \"loss\"\n").unwrap();
        assert!(matches!(bad.search_config(), Err(Failure::Config(_))));
    }
}
