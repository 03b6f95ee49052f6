//! The ARQ search loop: certify the original network once, then repeatedly
//! propose a policy, quantize, fine-tune, certify incrementally and reward.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::certify::{certified_accuracy, certify_dataset, incremental_certify, AcrReport, CertCache, SmoothingParams};
use crate::cost::{action_to_bitwidth, enforce_budget, min_achievable_bops, policy_cost, CostReport};
use crate::data::Dataset;
use crate::ddpg::{build_state, Agent, AgentConfig, AgentObservation, NetStats};
use crate::error::{Error, Result};
use crate::nn::{Network, TrainConfig};
use crate::quant::{Calibrator, QuantPolicy, QuantizedNetwork, PINNED_BITS};
use crate::rng::{derive_seed, Purpose};

/// Quantity rewarded after each episode, always as the quantized network's
/// value minus the original network's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RewardMode {
    /// Average certified radius.
    #[default]
    Acr,
    /// Noise-free accuracy of the base classifier.
    Val,
    /// Clean accuracy of the smoothed classifier.
    Acc,
    /// Certified accuracy at the configured radius.
    AccAtR,
    /// ACR plus clean accuracy.
    AcrPlusAcc,
}

impl RewardMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Acr => "acr",
            Self::Val => "val",
            Self::Acc => "acc",
            Self::AccAtR => "acc_at_r",
            Self::AcrPlusAcc => "acr_plus_acc",
        }
    }
}

impl FromStr for RewardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "acr" => Self::Acr,
            "val" => Self::Val,
            "acc" => Self::Acc,
            "acc_at_r" => Self::AccAtR,
            "acr_plus_acc" => Self::AcrPlusAcc,
            other => {
                return Err(Error::Config(format!(
                    "unknown reward mode {other:?} (expected acr, val, acc, acc_at_r or acr_plus_acc)"
                )))
            }
        })
    }
}

/// Metrics of one classifier that any reward mode may need.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardStats {
    pub acr: f64,
    pub clean_accuracy: f64,
    pub accuracy_at_r: f64,
    pub val_accuracy: f64,
}

impl RewardStats {
    pub fn from_report(report: &AcrReport, val_accuracy: f64, r: f64) -> Self {
        Self {
            acr: report.acr,
            clean_accuracy: report.clean_accuracy(),
            accuracy_at_r: certified_accuracy(&report.records, r),
            val_accuracy,
        }
    }

    fn value(&self, mode: RewardMode) -> f64 {
        match mode {
            RewardMode::Acr => self.acr,
            RewardMode::Val => self.val_accuracy,
            RewardMode::Acc => self.clean_accuracy,
            RewardMode::AccAtR => self.accuracy_at_r,
            RewardMode::AcrPlusAcc => self.acr + self.clean_accuracy,
        }
    }
}

pub fn reward_variant(mode: RewardMode, quantized: &RewardStats, original: &RewardStats) -> f64 {
    quantized.value(mode) - original.value(mode)
}

/// BitOPs budget, either absolute or as the cost of a uniform policy with
/// 8-bit end layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Budget {
    Bops(u128),
    UniformBits(u32),
}

impl Budget {
    pub fn resolve(self, net: &Network, bit_min: u32, bit_max: u32) -> Result<u128> {
        match self {
            Self::Bops(b) => Ok(b),
            Self::UniformBits(bits) => {
                let p = QuantPolicy::uniform(net, bits, bit_min, bit_max).with_end_pins();
                Ok(policy_cost(net, &p)?.total_bops)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub sigma: f64,
    /// Samples per input when certifying the original network.
    pub n0: usize,
    /// Samples per input for incremental certification.
    pub n: usize,
    /// Fine-tune subset size.
    pub n1: usize,
    pub budget: Budget,
    pub episodes: usize,
    pub bit_min: u32,
    pub bit_max: u32,
    pub alpha: f64,
    pub alpha_zeta: f64,
    /// Number of certification inputs.
    pub num_inputs: usize,
    pub seed: u64,
    pub reward: RewardMode,
    /// Radius used by [`RewardMode::AccAtR`].
    pub reward_radius: f64,
    /// Recalibrate clips after fine-tuning.
    pub recalibrate: bool,
    /// Fine-tune hyperparameters; the seed is derived from [`seed`](Self::seed).
    pub fine_tune: TrainConfig,
    pub agent: AgentConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            sigma: 0.25,
            n0: 4000,
            n: 200,
            n1: 512,
            budget: Budget::UniformBits(4),
            episodes: 60,
            bit_min: 2,
            bit_max: 8,
            alpha: 0.001,
            alpha_zeta: 0.001,
            num_inputs: 100,
            seed: 0,
            reward: RewardMode::Acr,
            reward_radius: 0.5,
            recalibrate: true,
            fine_tune: TrainConfig {
                learning_rate: 0.01,
                momentum: 0.9,
                weight_decay: 0.0,
                epochs: 1,
                batch_size: 32,
                noise_sigma: 0.25,
                seed: 0,
            },
            agent: AgentConfig::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if self.n0 == 0 || self.n == 0 || self.num_inputs == 0 {
            return bad("n0, n and num_inputs must be positive".into());
        }
        if self.n > self.n0 {
            return bad(format!("n ({}) must not exceed n0 ({})", self.n, self.n0));
        }
        if self.bit_min < 1 || self.bit_min > self.bit_max || self.bit_max > 32 {
            return bad(format!("invalid bit range [{}, {}]", self.bit_min, self.bit_max));
        }
        if !(self.bit_min..=self.bit_max).contains(&PINNED_BITS) {
            return bad(format!("bit range must contain the {PINNED_BITS}-bit end layers"));
        }
        for (name, a) in [("alpha", self.alpha), ("alpha_zeta", self.alpha_zeta)] {
            if !(a > 0.0 && a < 1.0) {
                return bad(format!("{name} must be in (0, 1), got {a}"));
            }
        }
        if !self.reward_radius.is_finite() || self.reward_radius < 0.0 {
            return bad(format!("reward_radius must be non-negative, got {}", self.reward_radius));
        }
        self.fine_tune.validate()?;
        self.agent.validate()
    }

    fn fine_tune_cfg(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, Purpose::FineTune as u64),
            ..self.fine_tune.clone()
        }
    }

    fn smoothing(&self) -> SmoothingParams {
        SmoothingParams::new(self.sigma, self.n0, self.alpha)
    }
}

/// Certification inputs plus the pool used for fine-tuning and calibration.
#[derive(Debug, Clone, Copy)]
pub struct SearchData<'a> {
    pub cert: &'a Dataset,
    pub pool: &'a Dataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub policy: QuantPolicy,
    pub acr: f64,
    pub reward: f64,
    pub bops: u128,
    pub size_bits: u128,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    /// `None` when no episode ran.
    pub best_policy: Option<QuantPolicy>,
    pub best_reward: Option<f64>,
    pub best_network: Option<QuantizedNetwork>,
    pub acr_orig: f64,
    pub original: AcrReport,
    pub cache: CertCache,
    pub budget: u128,
    pub history: Vec<EpisodeRecord>,
    pub agent: Agent,
}

impl SearchResult {
    /// `episode,reward,acr_p,bops,size_bits,policy_string`.
    pub fn history_csv(&self) -> String {
        history_csv(&self.history)
    }
}

pub fn history_csv(history: &[EpisodeRecord]) -> String {
    let mut out = String::from("episode,reward,acr_p,bops,size_bits,policy_string\n");
    for h in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            h.episode,
            h.reward,
            h.acr,
            h.bops,
            h.size_bits,
            h.policy.policy_string()
        );
    }
    out
}

/// Fraction of inputs the base classifier gets right without noise.
fn val_accuracy(clf: &dyn Fn(&[f64]) -> usize, data: &Dataset) -> f64 {
    let hits = (0..data.len()).filter(|&i| clf(data.sample(i)) == data.label(i)).count();
    hits as f64 / data.len() as f64
}

fn cert_inputs(cfg: &SearchConfig, data: &Dataset) -> Result<Dataset> {
    if data.len() < cfg.num_inputs {
        return Err(Error::Config(format!(
            "{} certification inputs requested, dataset has {}",
            cfg.num_inputs,
            data.len()
        )));
    }
    Ok(data.head(cfg.num_inputs))
}

/// Budget in BitOPs, checked to be reachable with every decided layer at
/// `bit_min`.
fn checked_budget(cfg: &SearchConfig, net: &Network) -> Result<u128> {
    let budget = cfg.budget.resolve(net, cfg.bit_min, cfg.bit_max)?;
    let template = QuantPolicy::uniform(net, PINNED_BITS, cfg.bit_min, cfg.bit_max).with_end_pins();
    let min_cost = min_achievable_bops(net, &template)?;
    if min_cost > budget {
        return Err(Error::Unsatisfiable { min_cost });
    }
    Ok(budget)
}

/// Quantizes with clips from `calib`, then fine-tunes from the original
/// weights with the run's fixed fine-tune seed.
fn quantize_and_tune(
    net: &Network,
    calibrator: &Calibrator,
    policy: &QuantPolicy,
    pool: &Dataset,
    cfg: &SearchConfig,
) -> Result<QuantizedNetwork> {
    let q = calibrator.apply(net, policy)?;
    q.fine_tune(pool, &cfg.fine_tune_cfg(), cfg.n1, pool, cfg.recalibrate)
}

/// Runs the search for `cfg.episodes` episodes.
///
/// The original network is certified once with `n0` samples; each episode
/// then assigns weight and activation bits to every quantizable layer except
/// the 8-bit first and last, enforces the budget, fine-tunes from the
/// original weights and certifies incrementally with `n` samples.
pub fn run_search(cfg: &SearchConfig, net: &Network, data: SearchData<'_>) -> Result<SearchResult> {
    cfg.validate()?;
    let budget = checked_budget(cfg, net)?;
    let x = cert_inputs(cfg, data.cert)?;
    if cfg.n1 > data.pool.len() {
        return Err(Error::Config(format!(
            "fine-tune subset {} exceeds pool size {}",
            cfg.n1,
            data.pool.len()
        )));
    }

    let cert_seed = derive_seed(cfg.seed, Purpose::Certify as u64);
    let (original, cache) = certify_dataset(net, &x, &cfg.smoothing(), cert_seed, cfg.n)?;
    let acr_orig = original.acr;
    let orig_stats = RewardStats::from_report(
        &original,
        val_accuracy(&|s| net.classify_slice(s, None), &x),
        cfg.reward_radius,
    );
    log::info!("original ACR {acr_orig:.4}, clean accuracy {:.3}", orig_stats.clean_accuracy);

    let calibrator = Calibrator::new(net, data.pool)?;
    let mut agent = Agent::new(cfg.agent.clone(), derive_seed(cfg.seed, Purpose::Agent as u64))?;
    let stats = NetStats::new(net);
    let template = QuantPolicy::uniform(net, PINNED_BITS, cfg.bit_min, cfg.bit_max).with_end_pins();
    let n_entries = template.entries.len();
    let decided: Vec<usize> = (1..n_entries.saturating_sub(1)).collect();

    let mut history = Vec::with_capacity(cfg.episodes);
    let mut best: Option<(f64, QuantPolicy, QuantizedNetwork)> = None;
    for episode in 0..cfg.episodes {
        let mut policy = template.clone();
        let mut steps: Vec<(AgentObservation, f64)> = Vec::with_capacity(2 * decided.len());
        let mut a_prev = 0.0;
        for &i in &decided {
            let layer = &net.layers()[policy.entries[i].layer];
            for activation in [false, true] {
                let obs = build_state(layer, activation, a_prev, &stats)?;
                let a = agent.select_action(&obs);
                let bits = action_to_bitwidth(a, cfg.bit_min, cfg.bit_max)?;
                if activation {
                    policy.entries[i].a_bits = bits;
                } else {
                    policy.entries[i].w_bits = bits;
                }
                steps.push((obs, a));
                a_prev = a;
            }
        }
        for (j, &(obs, a)) in steps.iter().enumerate() {
            let (next, done) = match steps.get(j + 1) {
                Some(&(next, _)) => (next, false),
                None => (obs, true),
            };
            agent.buffer.push(obs, a, next, done);
        }

        let policy = enforce_budget(net, &policy, budget)?;
        let q = quantize_and_tune(net, &calibrator, &policy, data.pool, cfg)?;
        let report = incremental_certify(&q, &cache, &x, cfg.sigma, cfg.n, cfg.alpha_zeta)?;
        let q_stats = RewardStats::from_report(&report, val_accuracy(&|s| q.classify_slice(s), &x), cfg.reward_radius);
        let reward = reward_variant(cfg.reward, &q_stats, &orig_stats);
        if !steps.is_empty() {
            agent.finish_episode(reward)?;
        }
        let cost = policy_cost(net, &policy)?;
        log::info!(
            "episode {episode}: reward {reward:.4}, ACR {:.4}, BitOPs {}, policy {}",
            report.acr,
            cost.total_bops,
            policy.policy_string()
        );
        history.push(EpisodeRecord {
            episode,
            policy: policy.clone(),
            acr: report.acr,
            reward,
            bops: cost.total_bops,
            size_bits: cost.total_size_bits,
        });
        if best.as_ref().is_none_or(|(r, _, _)| reward > *r) {
            best = Some((reward, policy, q));
        }
    }

    let (best_reward, best_policy, best_network) = match best {
        Some((r, p, q)) => (Some(r), Some(p), Some(q)),
        None => (None, None, None),
    };
    Ok(SearchResult {
        best_policy,
        best_reward,
        best_network,
        acr_orig,
        original,
        cache,
        budget,
        history,
        agent,
    })
}

/// Full randomized-smoothing evaluation of `policy` with `n0` samples per
/// input, after the same quantize-and-fine-tune step the search uses.
/// Evaluates the first `num_inputs` inputs of `eval`; noise comes from a
/// stream distinct from the search's certification stream.
pub fn evaluate_policy(
    net: &Network,
    policy: &QuantPolicy,
    eval: &Dataset,
    pool: &Dataset,
    cfg: &SearchConfig,
) -> Result<(AcrReport, CostReport)> {
    cfg.validate()?;
    let cost = policy_cost(net, policy)?;
    let x = cert_inputs(cfg, eval)?;
    let q = quantize_and_tune(net, &Calibrator::new(net, pool)?, policy, pool, cfg)?;
    let (report, _) = certify_dataset(&q, &x, &cfg.smoothing(), evaluation_seed(cfg), 0)?;
    Ok((report, cost))
}

/// Full randomized-smoothing evaluation of the float network on the same
/// inputs and noise as [`evaluate_policy`].
pub fn evaluate_float(net: &Network, eval: &Dataset, cfg: &SearchConfig) -> Result<AcrReport> {
    cfg.validate()?;
    let x = cert_inputs(cfg, eval)?;
    Ok(certify_dataset(net, &x, &cfg.smoothing(), evaluation_seed(cfg), 0)?.0)
}

fn evaluation_seed(cfg: &SearchConfig) -> u64 {
    derive_seed(cfg.seed, Purpose::Evaluate as u64)
}
