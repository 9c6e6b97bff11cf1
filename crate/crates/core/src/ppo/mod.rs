//! Proximal policy optimization: clipped surrogate, GAE advantages, Adam, on a two-headed MLP.

mod net;

pub use net::{log_softmax, softmax, Forward, PolicyValueNet};

use std::collections::VecDeque;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// A discrete-action episodic environment.
pub trait Environment {
    fn observation_len(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn reset(&mut self) -> Result<Vec<f64>>;
    /// Returns (next observation, reward, done).
    fn step(&mut self, action: usize) -> Result<(Vec<f64>, f64, bool)>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    /// Environment steps between updates.
    pub update_frequency: usize,
    pub trajectory_capacity: usize,
    pub clip_ratio: f64,
    pub discount: f64,
    pub gae_lambda: f64,
    pub learning_rate: f64,
    pub epochs_per_update: usize,
    pub n_minibatches: usize,
    pub entropy_coefficient: f64,
    pub value_coefficient: f64,
    /// Global gradient-norm clip per minibatch step.
    pub max_grad_norm: f64,
    pub hidden: [usize; 2],
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            update_frequency: 64,
            trajectory_capacity: 256,
            clip_ratio: 0.2,
            discount: 0.99,
            gae_lambda: 0.95,
            learning_rate: 3e-4,
            epochs_per_update: 4,
            n_minibatches: 4,
            entropy_coefficient: 0.01,
            value_coefficient: 0.5,
            max_grad_norm: 0.5,
            hidden: [45, 30],
            seed: 0,
        }
    }
}

impl PpoConfig {
    /// Hidden sizes used for the 4-mode and 6-mode searches.
    pub fn hidden_for_modes(n_modes: usize) -> [usize; 2] {
        if n_modes >= 6 {
            [150, 90]
        } else {
            [45, 30]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.update_frequency == 0 || self.update_frequency > self.trajectory_capacity {
            return Err(Error::InvalidParameter(format!(
                "update frequency {} must be in 1..={}",
                self.update_frequency, self.trajectory_capacity
            )));
        }
        if self.n_minibatches == 0 || self.n_minibatches > self.update_frequency || self.epochs_per_update == 0 {
            return Err(Error::InvalidParameter("minibatch count and epochs must be positive".into()));
        }
        if !(self.clip_ratio > 0.0 && self.learning_rate > 0.0) {
            return Err(Error::InvalidParameter("clip ratio and learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.discount) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::InvalidParameter("discount and GAE lambda must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub observation: Vec<f64>,
    pub action: usize,
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    pub done: bool,
}

/// Ring buffer of recent transitions; the newest `fresh` ones feed the next update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    capacity: usize,
    items: VecDeque<Transition>,
    fresh: usize,
}

impl Trajectory {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, items: VecDeque::with_capacity(capacity), fresh: 0 }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        self.fresh = (self.fresh + 1).min(self.capacity);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn fresh(&self) -> usize {
        self.fresh
    }

    /// Fresh transitions, oldest first.
    pub fn fresh_slice(&self) -> Vec<&Transition> {
        self.items.iter().skip(self.items.len() - self.fresh).collect()
    }

    fn consume(&mut self) {
        self.fresh = 0;
    }
}

/// Generalized advantage estimates and returns. `bootstrap` is the value of the state after the
/// last transition (ignored when that transition ends an episode).
pub fn gae(transitions: &[&Transition], bootstrap: f64, discount: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = transitions.len();
    let mut adv = vec![0.0; n];
    let mut next_value = bootstrap;
    let mut running = 0.0;
    for i in (0..n).rev() {
        let t = transitions[i];
        let live = if t.done { 0.0 } else { 1.0 };
        let delta = t.reward + discount * next_value * live - t.value;
        running = delta + discount * lambda * live * running;
        adv[i] = running;
        next_value = t.value;
    }
    let returns = adv.iter().zip(transitions).map(|(a, t)| a + t.value).collect();
    (adv, returns)
}

/// Per-sample loss pieces: gradients with respect to logits and value, plus diagnostics.
struct SampleLoss {
    dlogits: Vec<f64>,
    dvalue: f64,
    surrogate: f64,
    value_loss: f64,
}

/// Loss = -min(r A, clip(r) A) + c_v (V - R)^2 - c_e H, with `r = exp(logp - logp_old)`.
fn sample_loss(fwd: &Forward, action: usize, old_log_prob: f64, adv: f64, ret: f64, cfg: &PpoConfig) -> SampleLoss {
    let logp = log_softmax(&fwd.logits);
    let ratio = (logp[action] - old_log_prob).exp();
    let clipped = ratio.clamp(1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio);
    let surrogate = (ratio * adv).min(clipped * adv);
    // d surrogate / d logp: the unclipped branch is active whenever it is the minimum.
    let dsur = if ratio * adv <= clipped * adv { ratio * adv } else { 0.0 };
    let entropy = fwd.entropy();
    let dlogits = fwd
        .probs
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let dlogp = if k == action { 1.0 - p } else { -p };
            let dh = if p > 0.0 { -p * (logp[k] + entropy) } else { 0.0 };
            -dsur * dlogp - cfg.entropy_coefficient * dh
        })
        .collect();
    let err = fwd.value - ret;
    SampleLoss { dlogits, dvalue: 2.0 * cfg.value_coefficient * err, surrogate, value_loss: err * err }
}

/// Total minibatch loss (mean over samples); used for finite-difference checks.
pub fn batch_loss(
    net: &PolicyValueNet,
    batch: &[(&Transition, f64, f64)],
    cfg: &PpoConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for (t, adv, ret) in batch {
        let f = net.forward(&t.observation)?;
        let logp = log_softmax(&f.logits)[t.action];
        let ratio = (logp - t.log_prob).exp();
        let clipped = ratio.clamp(1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio);
        let sur = (ratio * adv).min(clipped * adv);
        total += -sur + cfg.value_coefficient * (f.value - ret).powi(2) - cfg.entropy_coefficient * f.entropy();
    }
    Ok(total / batch.len() as f64)
}

/// Analytic gradient of `batch_loss`.
pub fn batch_gradient(
    net: &PolicyValueNet,
    batch: &[(&Transition, f64, f64)],
    cfg: &PpoConfig,
) -> Result<(Vec<f64>, f64, f64)> {
    let mut grad = vec![0.0; net.params().len()];
    let scale = 1.0 / batch.len() as f64;
    let (mut sur, mut vl) = (0.0, 0.0);
    for (t, adv, ret) in batch {
        let f = net.forward(&t.observation)?;
        let mut s = sample_loss(&f, t.action, t.log_prob, *adv, *ret, cfg);
        s.dlogits.iter_mut().for_each(|d| *d *= scale);
        net.backward(&f, &s.dlogits, s.dvalue * scale, &mut grad);
        sur += s.surrogate * scale;
        vl += s.value_loss * scale;
    }
    Ok((grad, sur, vl))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    /// Mean clipped surrogate over the last epoch.
    pub surrogate: f64,
    pub value_loss: f64,
    pub samples: usize,
}

/// One PPO update on the fresh transitions of `traj`, which are then marked consumed.
pub fn ppo_update(
    net: &mut PolicyValueNet,
    adam: &mut Adam,
    traj: &mut Trajectory,
    bootstrap: f64,
    cfg: &PpoConfig,
    rng: &mut impl Rng,
) -> Result<UpdateStats> {
    let fresh = traj.fresh_slice();
    if fresh.is_empty() {
        return Err(Error::InvalidParameter("PPO update on an empty trajectory".into()));
    }
    let (mut adv, returns) = gae(&fresh, bootstrap, cfg.discount, cfg.gae_lambda);
    let n = adv.len();
    let mean = adv.iter().sum::<f64>() / n as f64;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    adv.iter_mut().for_each(|a| *a = if std > 1e-8 { (*a - mean) / (std + 1e-8) } else { 0.0 });

    let mut idx: Vec<usize> = (0..n).collect();
    let mb = n.div_ceil(cfg.n_minibatches.min(n));
    let mut stats = UpdateStats { surrogate: 0.0, value_loss: 0.0, samples: n };
    for epoch in 0..cfg.epochs_per_update {
        idx.shuffle(rng);
        let (mut sur, mut vl) = (0.0, 0.0);
        for chunk in idx.chunks(mb) {
            let batch: Vec<(&Transition, f64, f64)> = chunk.iter().map(|&i| (fresh[i], adv[i], returns[i])).collect();
            let (mut grad, s, v) = batch_gradient(net, &batch, cfg)?;
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > cfg.max_grad_norm {
                grad.iter_mut().for_each(|g| *g *= cfg.max_grad_norm / norm);
            }
            adam.step(net.params_mut(), &grad, cfg.learning_rate);
            sur += s * chunk.len() as f64 / n as f64;
            vl += v * chunk.len() as f64 / n as f64;
        }
        if epoch + 1 == cfg.epochs_per_update {
            stats.surrogate = sur;
            stats.value_loss = vl;
        }
    }
    traj.consume();
    Ok(stats)
}

/// Draws an action index from a probability vector.
pub fn sample_action(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Serializable training state; restoring it continues the run bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: PpoConfig,
    pub net: PolicyValueNet,
    pub adam: Adam,
    pub trajectory: Trajectory,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    pub steps: u64,
    pub episodes: u64,
    pub updates: u64,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let c: Self = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("checkpoint version {} is not {CHECKPOINT_VERSION}", c.version)));
        }
        Ok(c)
    }
}

#[derive(Debug, Clone)]
pub struct Trainer<E> {
    pub env: E,
    pub net: PolicyValueNet,
    pub adam: Adam,
    pub config: PpoConfig,
    pub trajectory: Trajectory,
    rng: ChaCha8Rng,
    pub steps: u64,
    pub episodes: u64,
    pub updates: u64,
    pub last_stats: Option<UpdateStats>,
}

impl<E: Environment> Trainer<E> {
    pub fn new(env: E, config: PpoConfig) -> Result<Self> {
        config.validate()?;
        let mut init_rng = seed::rng(config.seed, seed::streams::INIT);
        let net = PolicyValueNet::new(env.observation_len(), config.hidden, env.n_actions(), &mut init_rng)?;
        let adam = Adam::new(net.params().len());
        Ok(Self {
            env,
            adam,
            trajectory: Trajectory::new(config.trajectory_capacity),
            rng: seed::rng(config.seed, seed::streams::PPO),
            net,
            config,
            steps: 0,
            episodes: 0,
            updates: 0,
            last_stats: None,
        })
    }

    pub fn from_checkpoint(env: E, c: Checkpoint) -> Result<Self> {
        c.config.validate()?;
        if c.net.input_len() != env.observation_len() || c.net.n_actions() != env.n_actions() {
            return Err(Error::Format("checkpoint network does not fit this environment".into()));
        }
        let mut rng = ChaCha8Rng::from_seed(c.rng_seed);
        rng.set_stream(c.rng_stream);
        rng.set_word_pos(c.rng_word_pos);
        Ok(Self {
            env,
            net: c.net,
            adam: c.adam,
            config: c.config,
            trajectory: c.trajectory,
            rng,
            steps: c.steps,
            episodes: c.episodes,
            updates: c.updates,
            last_stats: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            net: self.net.clone(),
            adam: self.adam.clone(),
            trajectory: self.trajectory.clone(),
            rng_seed: self.rng.get_seed(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos(),
            steps: self.steps,
            episodes: self.episodes,
            updates: self.updates,
        }
    }

    /// Runs one episode, updating whenever `update_frequency` fresh steps have accumulated.
    /// Returns the undiscounted episode return.
    pub fn run_episode(&mut self) -> Result<f64> {
        let mut obs = self.env.reset()?;
        let mut total = 0.0;
        loop {
            let f = self.net.forward(&obs)?;
            let action = sample_action(&f.probs, &mut self.rng);
            let (next, reward, done) = self.env.step(action)?;
            self.trajectory.push(Transition {
                observation: obs,
                action,
                log_prob: f.log_prob(action),
                reward,
                value: f.value,
                done,
            });
            self.steps += 1;
            total += reward;
            if self.trajectory.fresh() >= self.config.update_frequency {
                let bootstrap = if done { 0.0 } else { self.net.forward(&next)?.value };
                let stats =
                    ppo_update(&mut self.net, &mut self.adam, &mut self.trajectory, bootstrap, &self.config, &mut self.rng)?;
                self.updates += 1;
                self.last_stats = Some(stats);
            }
            if done {
                self.episodes += 1;
                return Ok(total);
            }
            obs = next;
        }
    }

    /// Runs `episodes` episodes, calling `on_episode(env, return)` after each.
    pub fn train(&mut self, episodes: usize, mut on_episode: impl FnMut(&E, f64)) -> Result<Vec<f64>> {
        let mut returns = Vec::with_capacity(episodes);
        for _ in 0..episodes {
            let r = self.run_episode()?;
            on_episode(&self.env, r);
            returns.push(r);
        }
        Ok(returns)
    }
}
