use std::sync::OnceLock;

use arq_core::cost::{min_achievable_bops, policy_cost};
use arq_core::data::{gen_dataset, DataConfig, DatasetSplits};
use arq_core::ddpg::AgentConfig;
use arq_core::nn::{tiny_conv_net, train_gaussian, Network, TinyConvConfig, TrainConfig};
use arq_core::quant::QuantPolicy;
use arq_core::search::{evaluate_policy, run_search, Budget, RewardMode, SearchConfig, SearchData};
use arq_core::Error;

struct Setup {
    splits: DatasetSplits,
    net: Network,
}

fn setup() -> &'static Setup {
    static SETUP: OnceLock<Setup> = OnceLock::new();
    SETUP.get_or_init(|| {
        let splits = gen_dataset(&DataConfig {
            per_class: 80,
            seed: 5,
            ..DataConfig::default()
        })
        .unwrap();
        let cfg = TinyConvConfig {
            channels: vec![4, 4, 4],
            hidden: 8,
            ..TinyConvConfig::default()
        };
        let net = tiny_conv_net(&cfg, 5).unwrap();
        let train = TrainConfig {
            epochs: 4,
            seed: 5,
            ..TrainConfig::default()
        };
        let net = train_gaussian(net, &splits.train, &train).unwrap().net;
        Setup { splits, net }
    })
}

fn small_config(episodes: usize) -> SearchConfig {
    SearchConfig {
        n0: 200,
        n: 50,
        n1: 64,
        episodes,
        num_inputs: 12,
        seed: 9,
        agent: AgentConfig {
            warmup_episodes: 1,
            batch_size: 4,
            hidden: 16,
            ..AgentConfig::default()
        },
        ..SearchConfig::default()
    }
}

fn data(s: &Setup) -> SearchData<'_> {
    SearchData {
        cert: &s.splits.cert,
        pool: &s.splits.train,
    }
}

#[test]
fn zero_episodes_certifies_only_the_original() {
    let s = setup();
    let res = run_search(&small_config(0), &s.net, data(s)).unwrap();
    assert!(res.best_policy.is_none() && res.best_reward.is_none() && res.best_network.is_none());
    assert!(res.history.is_empty());
    assert_eq!(res.history_csv(), "episode,reward,acr_p,bops,size_bits,policy_string\n");
    assert_eq!(res.original.records.len(), 12);
    assert_eq!(res.cache.entries.len(), 12);
    assert!(res.cache.entries.iter().all(|e| e.trace.len() == 50));
}

#[test]
fn history_respects_budget_pins_and_running_best() {
    let s = setup();
    let res = run_search(&small_config(5), &s.net, data(s)).unwrap();
    assert_eq!(res.history.len(), 5);
    for (i, h) in res.history.iter().enumerate() {
        assert_eq!(h.episode, i);
        assert!(h.bops <= res.budget);
        assert!(h.policy.has_end_pins());
        assert_eq!(policy_cost(&s.net, &h.policy).unwrap().total_bops, h.bops);
        assert!((h.reward - (h.acr - res.acr_orig)).abs() < 1e-12);
        assert!(h.acr <= res.acr_orig + 1e-12);
    }
    let best = res.history.iter().map(|h| h.reward).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(res.best_reward, Some(best));
    let first = res.history.iter().find(|h| h.reward == best).unwrap();
    assert_eq!(res.best_policy.as_ref(), Some(&first.policy));
    assert_eq!(res.best_network.as_ref().unwrap().policy(), &first.policy);
    assert_eq!(res.agent.episodes(), 5);
}

#[test]
fn tightest_budget_forces_minimum_bits() {
    let s = setup();
    let template = QuantPolicy::uniform(&s.net, 8, 2, 8).with_end_pins();
    let floor = min_achievable_bops(&s.net, &template).unwrap();
    let cfg = SearchConfig {
        budget: Budget::Bops(floor),
        ..small_config(3)
    };
    let res = run_search(&cfg, &s.net, data(s)).unwrap();
    for h in &res.history {
        let n = h.policy.entries.len();
        for e in &h.policy.entries[1..n - 1] {
            assert_eq!((e.w_bits, e.a_bits), (2, 2));
        }
        assert_eq!(h.bops, floor);
    }
}

#[test]
fn unreachable_budget_is_reported() {
    let s = setup();
    let template = QuantPolicy::uniform(&s.net, 8, 2, 8).with_end_pins();
    let floor = min_achievable_bops(&s.net, &template).unwrap();
    let cfg = SearchConfig {
        budget: Budget::Bops(floor - 1),
        ..small_config(3)
    };
    match run_search(&cfg, &s.net, data(s)) {
        Err(Error::Unsatisfiable { min_cost }) => assert_eq!(min_cost, floor),
        other => panic!("expected an unsatisfiable budget, got {:?}", other.map(|r| r.history)),
    }
}

#[test]
fn bad_configs_are_rejected() {
    let s = setup();
    for cfg in [
        SearchConfig { n: 300, ..small_config(1) },
        SearchConfig { num_inputs: 10_000, ..small_config(1) },
        SearchConfig { n1: 100_000, ..small_config(1) },
        SearchConfig { bit_max: 6, ..small_config(1) },
    ] {
        assert!(matches!(run_search(&cfg, &s.net, data(s)), Err(Error::Config(_))), "{cfg:?}");
    }
}

#[test]
fn runs_are_reproducible_across_thread_counts() {
    let s = setup();
    let cfg = SearchConfig {
        reward: RewardMode::AccAtR,
        ..small_config(4)
    };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_search(&cfg, &s.net, data(s)).unwrap())
    };
    let (a, b) = (run(1), run(3));
    assert_eq!(a.history_csv(), b.history_csv());
    assert_eq!(a.agent.save_checkpoint(), b.agent.save_checkpoint());
    let other = run_search(&SearchConfig { seed: 10, ..cfg.clone() }, &s.net, data(s)).unwrap();
    assert_ne!(a.history_csv(), other.history_csv());
}

#[test]
fn evaluation_is_deterministic() {
    let s = setup();
    let cfg = small_config(0);
    let policy = QuantPolicy::uniform(&s.net, 4, 2, 8).with_end_pins();
    let a = evaluate_policy(&s.net, &policy, &s.splits.eval, &s.splits.train, &cfg).unwrap();
    let b = evaluate_policy(&s.net, &policy, &s.splits.eval, &s.splits.train, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.0.records.len(), 12);
    assert_eq!(a.1, policy_cost(&s.net, &policy).unwrap());
    assert!(a.0.records.iter().all(|r| r.n == 200));
}
