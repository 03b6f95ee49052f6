//! DDPG agent for continuous bit-width actions.

use rand::Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::format::{decode_network_from, encode_network_into, Decoder, Encoder};
use crate::nn::{backward, mlp, Adam, AdamConfig, Gradients, LayerParams, LayerSpec, Network, Trace};
use crate::rng::{self, Purpose, StreamRng};

pub const CHECKPOINT_MAGIC: &[u8] = b"ARQDDPG";

/// Length of an [`AgentObservation`].
pub const STATE_DIM: usize = 10;

const STRUCTURAL: usize = 7;
const TRUNCATION_TRIES: usize = 16;

/// Layer state `(k, c_in, c_out, s_kernel, s_stride, s_feat, n_params, i_d,
/// i_wa, a_prev)`. The first seven entries are min-max normalized over the
/// network's quantizable layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentObservation(pub [f64; STATE_DIM]);

fn structural(layer: &LayerSpec) -> [f64; STRUCTURAL] {
    [
        layer.index as f64,
        layer.c_in as f64,
        layer.c_out as f64,
        layer.kernel as f64,
        layer.stride as f64,
        layer.feat as f64,
        layer.n_params as f64,
    ]
}

/// Per-network ranges of the structural features.
#[derive(Debug, Clone, PartialEq)]
pub struct NetStats {
    min: [f64; STRUCTURAL],
    max: [f64; STRUCTURAL],
}

impl NetStats {
    pub fn new(net: &Network) -> Self {
        let mut min = [f64::INFINITY; STRUCTURAL];
        let mut max = [f64::NEG_INFINITY; STRUCTURAL];
        for l in net.layers().iter().filter(|l| l.kind.is_quantizable()) {
            for (j, v) in structural(l).into_iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        Self { min, max }
    }
}

/// Featurizes one decision. Constant features normalize to 0.
pub fn build_state(layer: &LayerSpec, activation: bool, a_prev: f64, stats: &NetStats) -> Result<AgentObservation> {
    if !layer.kind.is_quantizable() {
        return Err(Error::Domain(format!("layer {} is not quantizable", layer.index)));
    }
    let mut s = [0.0; STATE_DIM];
    for (j, v) in structural(layer).into_iter().enumerate() {
        let span = stats.max[j] - stats.min[j];
        s[j] = if span > 0.0 { ((v - stats.min[j]) / span).clamp(0.0, 1.0) } else { 0.0 };
    }
    s[7] = f64::from(u8::from(layer.depthwise));
    s[8] = f64::from(u8::from(activation));
    s[9] = a_prev;
    Ok(AgentObservation(s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: AgentObservation,
    pub action: f64,
    pub reward: f64,
    pub next_state: AgentObservation,
    pub done: bool,
}

/// Ring buffer of finalized transitions plus the currently open episode.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    ring: Vec<Transition>,
    next: usize,
    open: Vec<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            ring: Vec::new(),
            next: 0,
            open: Vec::new(),
        }
    }

    /// Stores a transition of the open episode; its reward is filled in by
    /// [`finalize_episode`](Self::finalize_episode).
    pub fn push(&mut self, state: AgentObservation, action: f64, next_state: AgentObservation, done: bool) {
        self.open.push(Transition {
            state,
            action,
            reward: f64::NAN,
            next_state,
            done,
        });
    }

    /// Assigns `reward` to every transition of the open episode and makes
    /// them sample-able. Returns how many were finalized.
    pub fn finalize_episode(&mut self, reward: f64) -> Result<usize> {
        if self.open.is_empty() {
            return Err(Error::NoOpenEpisode);
        }
        let n = self.open.len();
        for mut t in std::mem::take(&mut self.open) {
            t.reward = reward;
            if self.ring.len() < self.capacity {
                self.ring.push(t);
            } else {
                self.ring[self.next] = t;
            }
            self.next = (self.next + 1) % self.capacity;
        }
        Ok(n)
    }

    /// Finalized transitions.
    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    pub fn open_len(&self) -> usize {
        self.open.len()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.ring
    }

    /// Uniform sample with replacement from finalized transitions.
    pub fn sample<'a>(&'a self, batch: usize, rng: &mut StreamRng) -> Vec<&'a Transition> {
        (0..batch).map(|_| &self.ring[rng.random_range(0..self.ring.len())]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
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

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            explore_std0: 0.5,
            explore_decay: 0.99,
            tau: 0.01,
            gamma: 1.0,
            batch_size: 64,
            warmup_episodes: 8,
            hidden: 300,
            buffer_capacity: 2048,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.actor_lr > 0.0
            && self.critic_lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.explore_std0 >= 0.0
            && (0.0..=1.0).contains(&self.explore_decay)
            && self.tau > 0.0
            && self.tau <= 1.0
            && (0.0..=1.0).contains(&self.gamma)
            && self.batch_size >= 1
            && self.hidden >= 1
            && self.buffer_capacity >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid agent config {self:?}")))
        }
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_objective: f64,
}

/// Actor/critic pair with target networks, optimizers, replay and RNG state.
#[derive(Debug, Clone)]
pub struct Agent {
    pub cfg: AgentConfig,
    actor: Network,
    critic: Network,
    actor_target: Network,
    critic_target: Network,
    actor_opt: Adam,
    critic_opt: Adam,
    pub buffer: ReplayBuffer,
    explore_rng: StreamRng,
    replay_rng: StreamRng,
    episodes: u64,
}

fn squash(z: f64) -> f64 {
    0.5 * (z.tanh() + 1.0)
}

fn critic_input(s: &AgentObservation, a: f64) -> [f64; STATE_DIM + 1] {
    let mut x = [0.0; STATE_DIM + 1];
    x[..STATE_DIM].copy_from_slice(&s.0);
    x[STATE_DIM] = a;
    x
}

impl Agent {
    pub fn new(cfg: AgentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let init = rng::derive_seed(seed, Purpose::Agent as u64);
        let mut actor = mlp(STATE_DIM, &[cfg.hidden, cfg.hidden], 1, init)?;
        let last = actor.params().len() - 1;
        if let Some(p) = actor.params_mut()[last].as_mut() {
            p.weight.data_mut().fill(0.0);
            p.bias.data_mut().fill(0.0);
        }
        let critic = mlp(STATE_DIM + 1, &[cfg.hidden, cfg.hidden], 1, init.wrapping_add(1))?;
        Ok(Self {
            actor_opt: Adam::new(cfg.adam(cfg.actor_lr), &actor),
            critic_opt: Adam::new(cfg.adam(cfg.critic_lr), &critic),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            explore_rng: rng::stream(seed, Purpose::Explore),
            replay_rng: rng::stream(seed, Purpose::Replay),
            episodes: 0,
            cfg,
        })
    }

    pub fn actor(&self) -> &Network {
        &self.actor
    }

    pub fn critic(&self) -> &Network {
        &self.critic
    }

    pub fn actor_target(&self) -> &Network {
        &self.actor_target
    }

    pub fn critic_target(&self) -> &Network {
        &self.critic_target
    }

    /// Finished episodes.
    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    /// `explore_std0 · explore_decay^episode`.
    pub fn explore_std(&self, episode: u64) -> f64 {
        self.cfg.explore_std0 * self.cfg.explore_decay.powi(episode as i32)
    }

    fn mu(net: &Network, s: &AgentObservation) -> f64 {
        squash(net.run(&s.0, None, None)[0])
    }

    /// Deterministic policy output `μ(S)` in `[0, 1]`.
    pub fn policy_action(&self, obs: &AgentObservation) -> f64 {
        Self::mu(&self.actor, obs)
    }

    /// `clip(μ(S) + ε, 0, 1)` with `ε` normal, redrawn up to 16 times to land
    /// inside `[0, 1]` before falling back to clipping.
    pub fn act(&mut self, obs: &AgentObservation, explore_std: f64) -> f64 {
        let mu = self.policy_action(obs);
        if explore_std <= 0.0 {
            return mu.clamp(0.0, 1.0);
        }
        let mut a = mu;
        for _ in 0..TRUNCATION_TRIES {
            let e: f64 = self.explore_rng.sample(StandardNormal);
            a = mu + explore_std * e;
            if (0.0..=1.0).contains(&a) {
                return a;
            }
        }
        a.clamp(0.0, 1.0)
    }

    /// Action for the current episode: uniform during warmup, otherwise
    /// [`act`](Self::act) with the decayed exploration noise.
    pub fn select_action(&mut self, obs: &AgentObservation) -> f64 {
        if (self.episodes as usize) < self.cfg.warmup_episodes {
            self.explore_rng.random_range(0.0..=1.0)
        } else {
            let std = self.explore_std(self.episodes);
            self.act(obs, std)
        }
    }

    /// Closes the open episode with `reward` and, after warmup, runs one
    /// update per transition of the episode.
    pub fn finish_episode(&mut self, reward: f64) -> Result<Vec<UpdateStats>> {
        let n = self.buffer.finalize_episode(reward)?;
        let mut stats = Vec::new();
        if (self.episodes as usize) >= self.cfg.warmup_episodes {
            for _ in 0..n {
                if let Some(s) = self.update() {
                    stats.push(s);
                }
            }
        }
        self.episodes += 1;
        Ok(stats)
    }

    /// One critic step, one actor step and a soft target update. `None`
    /// when the buffer holds fewer finalized transitions than a batch.
    pub fn update(&mut self) -> Option<UpdateStats> {
        let b = self.cfg.batch_size;
        if self.buffer.len() < b {
            return None;
        }
        let batch: Vec<Transition> = self
            .buffer
            .sample(b, &mut self.replay_rng)
            .into_iter()
            .cloned()
            .collect();
        let inv = 1.0 / b as f64;
        let mut trace = Trace::default();

        // Critic: minimize mean (Q(s, a) - y)^2.
        let mut cgrads = Gradients::zeros_like(&self.critic);
        let mut critic_loss = 0.0;
        for t in &batch {
            let y = if t.done {
                t.reward
            } else {
                let a2 = Self::mu(&self.actor_target, &t.next_state);
                let q2 = self.critic_target.run(&critic_input(&t.next_state, a2), None, None)[0];
                t.reward + self.cfg.gamma * q2
            };
            let q = self.critic.run(&critic_input(&t.state, t.action), None, Some(&mut trace))[0];
            critic_loss += (q - y) * (q - y) * inv;
            backward(&self.critic, None, &trace, vec![2.0 * (q - y) * inv], &mut cgrads);
        }
        self.critic_opt.step(&mut self.critic, &cgrads);

        // Actor: maximize mean Q(s, μ(s)).
        let mut agrads = Gradients::zeros_like(&self.actor);
        let mut scratch = Gradients::zeros_like(&self.critic);
        let mut ctrace = Trace::default();
        let mut objective = 0.0;
        for t in &batch {
            let z = self.actor.run(&t.state.0, None, Some(&mut trace))[0];
            let a = squash(z);
            let q = self.critic.run(&critic_input(&t.state, a), None, Some(&mut ctrace))[0];
            objective += q * inv;
            let gin = backward(&self.critic, None, &ctrace, vec![1.0], &mut scratch);
            let dq_da = gin[STATE_DIM];
            let th = z.tanh();
            let dz = -dq_da * 0.5 * (1.0 - th * th) * inv;
            backward(&self.actor, None, &trace, vec![dz], &mut agrads);
        }
        self.actor_opt.step(&mut self.actor, &agrads);

        soft_update(&mut self.actor_target, &self.actor, self.cfg.tau);
        soft_update(&mut self.critic_target, &self.critic, self.cfg.tau);
        Some(UpdateStats {
            critic_loss,
            actor_objective: objective,
        })
    }

    pub fn save_checkpoint(&self) -> Vec<u8> {
        let mut e = Encoder::new(CHECKPOINT_MAGIC);
        let c = &self.cfg;
        for v in [c.actor_lr, c.critic_lr, c.beta1, c.beta2, c.explore_std0, c.explore_decay, c.tau, c.gamma] {
            e.f64(v);
        }
        for v in [c.batch_size, c.warmup_episodes, c.hidden, c.buffer_capacity] {
            e.u64(v as u64);
        }
        e.u64(self.episodes);
        for rng in [&self.explore_rng, &self.replay_rng] {
            for byte in rng.get_seed() {
                e.u8(byte);
            }
            e.u64(rng.get_stream());
            let pos = rng.get_word_pos();
            e.u64(pos as u64);
            e.u64((pos >> 64) as u64);
        }
        for net in [&self.actor, &self.critic, &self.actor_target, &self.critic_target] {
            encode_network_into(&mut e, net);
        }
        for opt in [&self.actor_opt, &self.critic_opt] {
            e.u64(opt.t);
            for moments in [&opt.m, &opt.v] {
                for p in moments.iter().flatten() {
                    e.f64s(p.weight.data());
                    e.f64s(p.bias.data());
                }
            }
        }
        e.u64(self.buffer.ring.len() as u64);
        e.u64(self.buffer.next as u64);
        for t in &self.buffer.ring {
            e.f64s(&t.state.0);
            e.f64(t.action);
            e.f64(t.reward);
            e.f64s(&t.next_state.0);
            e.u8(u8::from(t.done));
        }
        e.finish()
    }

    /// Restores an agent written by [`save_checkpoint`](Self::save_checkpoint).
    /// Any open (unfinalized) episode is not part of a checkpoint.
    pub fn load_checkpoint(buf: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(buf, CHECKPOINT_MAGIC, "ARQDDPG")?;
        let mut f = [0.0; 8];
        for v in f.iter_mut() {
            *v = d.f64()?;
        }
        let mut u = [0usize; 4];
        for v in u.iter_mut() {
            *v = d.u64()? as usize;
        }
        let cfg = AgentConfig {
            actor_lr: f[0],
            critic_lr: f[1],
            beta1: f[2],
            beta2: f[3],
            explore_std0: f[4],
            explore_decay: f[5],
            tau: f[6],
            gamma: f[7],
            batch_size: u[0],
            warmup_episodes: u[1],
            hidden: u[2],
            buffer_capacity: u[3],
        };
        cfg.validate()?;
        let episodes = d.u64()?;
        let mut rngs = Vec::new();
        for _ in 0..2 {
            let mut seed = [0u8; 32];
            for b in seed.iter_mut() {
                *b = d.u8()?;
            }
            let mut rng = StreamRng::from_seed(seed);
            rng.set_stream(d.u64()?);
            let lo = d.u64()? as u128;
            let hi = d.u64()? as u128;
            rng.set_word_pos(lo | (hi << 64));
            rngs.push(rng);
        }
        let mut nets = Vec::new();
        for _ in 0..4 {
            nets.push(decode_network_from(&mut d)?);
        }
        let bad = |what: &str| Error::Format(format!("corrupt ARQDDPG file: {what}"));
        let (actor, critic) = (&nets[0], &nets[1]);
        if actor.input_len() != STATE_DIM || critic.input_len() != STATE_DIM + 1 {
            return Err(bad("network shapes"));
        }
        let mut opts = Vec::new();
        for (net, lr) in [(actor, cfg.actor_lr), (critic, cfg.critic_lr)] {
            let mut opt = Adam::new(cfg.adam(lr), net);
            opt.t = d.u64()?;
            for moments in [&mut opt.m, &mut opt.v] {
                for p in moments.iter_mut().flatten() {
                    read_into(&mut d, p).map_err(|_| bad("optimizer state"))?;
                }
            }
            opts.push(opt);
        }
        let n = d.len(1)?;
        let next = d.u64()? as usize;
        let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
        for _ in 0..n {
            let state = read_obs(&mut d)?;
            let action = d.f64()?;
            let reward = d.f64()?;
            let next_state = read_obs(&mut d)?;
            let done = d.u8()? != 0;
            buffer.ring.push(Transition {
                state,
                action,
                reward,
                next_state,
                done,
            });
        }
        if buffer.ring.len() > buffer.capacity || next >= buffer.capacity {
            return Err(bad("replay buffer"));
        }
        buffer.next = next;
        d.finish()?;
        let mut nets = nets.into_iter();
        let mut opts = opts.into_iter();
        let mut rngs = rngs.into_iter();
        Ok(Self {
            cfg,
            actor: nets.next().expect("4 nets"),
            critic: nets.next().expect("4 nets"),
            actor_target: nets.next().expect("4 nets"),
            critic_target: nets.next().expect("4 nets"),
            actor_opt: opts.next().expect("2 optimizers"),
            critic_opt: opts.next().expect("2 optimizers"),
            buffer,
            explore_rng: rngs.next().expect("2 rngs"),
            replay_rng: rngs.next().expect("2 rngs"),
            episodes,
        })
    }
}

fn read_obs(d: &mut Decoder<'_>) -> Result<AgentObservation> {
    let v = d.f64s()?;
    let arr: [f64; STATE_DIM] = v
        .try_into()
        .map_err(|_| Error::Format("corrupt ARQDDPG file: observation length".into()))?;
    Ok(AgentObservation(arr))
}

fn read_into(d: &mut Decoder<'_>, p: &mut LayerParams) -> Result<()> {
    for t in [&mut p.weight, &mut p.bias] {
        let v = d.f64s()?;
        if v.len() != t.len() {
            return Err(Error::Format("length mismatch".into()));
        }
        t.data_mut().copy_from_slice(&v);
    }
    Ok(())
}

/// `target ← τ·online + (1 − τ)·target`, coordinate-wise.
pub fn soft_update(target: &mut Network, online: &Network, tau: f64) {
    for (t, o) in target.params_mut().iter_mut().zip(online.params()) {
        let (Some(t), Some(o)) = (t, o) else { continue };
        for (tv, ov) in [(&mut t.weight, &o.weight), (&mut t.bias, &o.bias)] {
            for (x, &y) in tv.data_mut().iter_mut().zip(ov.data()) {
                *x = if tau == 1.0 { y } else { tau * y + (1.0 - tau) * *x };
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{tiny_conv_net, NetworkBuilder, TinyConvConfig};

    fn obs(v: f64) -> AgentObservation {
        AgentObservation([v; STATE_DIM])
    }

    #[test]
    fn fresh_actor_outputs_half() {
        let agent = Agent::new(AgentConfig::default(), 3).unwrap();
        assert_eq!(agent.policy_action(&obs(0.3)), 0.5);
        let mut agent = agent;
        assert_eq!(agent.act(&obs(0.7), 0.0), 0.5);
    }

    #[test]
    fn exploration_stays_in_range() {
        let mut agent = Agent::new(AgentConfig::default(), 3).unwrap();
        for _ in 0..10_000 {
            let a = agent.act(&obs(0.1), 0.5);
            assert!((0.0..=1.0).contains(&a));
        }
        assert_eq!(agent.explore_std(0), 0.5);
        assert!((agent.explore_std(3) - 0.5 * 0.99f64.powi(3)).abs() < 1e-15);
    }

    #[test]
    fn finalize_sets_shared_reward() {
        let mut buf = ReplayBuffer::new(16);
        assert!(matches!(buf.finalize_episode(1.0), Err(Error::NoOpenEpisode)));
        for i in 0..3 {
            buf.push(obs(0.0), 0.1 * i as f64, obs(0.0), i == 2);
        }
        assert_eq!(buf.len(), 0);
        buf.finalize_episode(0.2).unwrap();
        buf.push(obs(0.0), 0.5, obs(0.0), true);
        buf.finalize_episode(0.0).unwrap();
        let rewards: Vec<f64> = buf.transitions().iter().map(|t| t.reward).collect();
        assert_eq!(rewards, vec![0.2, 0.2, 0.2, 0.0]);
    }

    #[test]
    fn ring_respects_capacity() {
        let mut buf = ReplayBuffer::new(4);
        for ep in 0..3 {
            for _ in 0..3 {
                buf.push(obs(0.0), 0.5, obs(0.0), false);
            }
            buf.finalize_episode(ep as f64).unwrap();
        }
        assert_eq!(buf.len(), 4);
        assert!(buf.transitions().iter().all(|t| t.reward.is_finite()));
    }

    #[test]
    fn states_are_normalized() {
        let net = tiny_conv_net(&TinyConvConfig::default(), 0).unwrap();
        let stats = NetStats::new(&net);
        for &k in &net.quantizable_layers() {
            for act in [false, true] {
                let s = build_state(&net.layers()[k], act, 0.3, &stats).unwrap();
                assert!(s.0.iter().all(|v| (0.0..=1.0).contains(v)));
                assert_eq!(s.0[8], if act { 1.0 } else { 0.0 });
                assert_eq!(s.0[9], 0.3);
            }
        }
        assert!(build_state(&net.layers()[1], false, 0.0, &stats).is_err());

        let single = NetworkBuilder::new(vec![4]).unwrap().dense(2).build(2, 0).unwrap();
        let s = build_state(&single.layers()[0], false, 0.0, &NetStats::new(&single)).unwrap();
        assert!(s.0[..7].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn terminal_targets_and_full_soft_update() {
        let cfg = AgentConfig {
            batch_size: 4,
            warmup_episodes: 0,
            tau: 1.0,
            ..AgentConfig::default()
        };
        let mut agent = Agent::new(cfg, 1).unwrap();
        assert!(agent.update().is_none());
        for _ in 0..4 {
            agent.buffer.push(obs(0.2), 0.7, obs(0.2), true);
        }
        agent.buffer.finalize_episode(0.4).unwrap();
        let q0 = agent.critic.run(&critic_input(&obs(0.2), 0.7), None, None)[0];
        let stats = agent.update().unwrap();
        assert!((stats.critic_loss - (q0 - 0.4).powi(2)).abs() < 1e-12);
        assert_eq!(agent.actor_target, agent.actor);
        assert_eq!(agent.critic_target, agent.critic);
    }

    #[test]
    fn soft_update_contracts() {
        let a = mlp(3, &[4], 1, 1).unwrap();
        let mut t = mlp(3, &[4], 1, 2).unwrap();
        let before = t.clone();
        soft_update(&mut t, &a, 0.25);
        for ((x0, x1), y) in before.params().iter().flatten().zip(t.params().iter().flatten()).zip(a.params().iter().flatten()) {
            for ((u0, u1), v) in x0.weight.data().iter().zip(x1.weight.data()).zip(y.weight.data()) {
                assert!(((u1 - v).abs() - 0.75 * (u0 - v).abs()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = AgentConfig {
            batch_size: 2,
            warmup_episodes: 0,
            ..AgentConfig::default()
        };
        let mut agent = Agent::new(cfg, 5).unwrap();
        for ep in 0..3 {
            let o = obs(0.1 * ep as f64);
            let a = agent.select_action(&o);
            agent.buffer.push(o, a, o, true);
            agent.finish_episode(ep as f64).unwrap();
        }
        let bytes = agent.save_checkpoint();
        let mut restored = Agent::load_checkpoint(&bytes).unwrap();
        assert_eq!(restored.save_checkpoint(), bytes);
        assert_eq!(restored.select_action(&obs(0.5)), agent.select_action(&obs(0.5)));
        assert_eq!(restored.update(), agent.update());
        assert!(Agent::load_checkpoint(&bytes[..bytes.len() / 2]).is_err());
    }
}
