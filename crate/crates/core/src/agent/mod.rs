//! DQN agents with frame and action memory, the training loop and the
//! single-frame classifiers.

mod classify;
mod train;

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use classify::{
    augment_frame, baseline_label, train_action_classifier_baseline, train_stop_classifier, AugmentConfig,
    ClassifierReport, ClassifierTrainConfig,
};
pub use train::{train, CurveRow, EpisodeLog, EpisodeStep, Termination, TrainOutcome};
pub(crate) use classify::stop_fires;

use crate::env::{Action, GridEnvironment};
use crate::error::{Error, Result};
use crate::nn::{
    default_conv, ConvSpec, LossKind, Optimizer, OptimizerConfig, Parameters, QBatch, QNetConfig, QNetwork, Variant,
};
use crate::replay::{FrameRef, PrioritizedReplay, ReplayConfig, StoredTransition};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub variant: Variant,
    pub frame_memory: usize,
    pub action_memory: usize,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_final: f64,
    /// Training budget in episodes. Epsilon is held for an episode and
    /// reaches its final value after a third of the budget.
    pub episodes: u64,
    /// Environment steps collected before the first update.
    pub warmup_steps: u64,
    /// Environment steps between updates.
    pub train_every: u64,
    /// Updates between target-network copies.
    pub target_sync: u64,
    pub batch_size: usize,
    pub max_episode_steps: usize,
    /// Pick the bootstrap action with the online network and evaluate it
    /// with the target network instead of maximizing over the target.
    pub double_dqn: bool,
    pub loss: LossKind,
    pub optimizer: OptimizerConfig,
    pub replay: ReplayConfig,
    pub conv: Vec<ConvSpec>,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Ms,
            frame_memory: 3,
            action_memory: 3,
            gamma: 0.9,
            epsilon_start: 1.0,
            epsilon_final: 0.02,
            episodes: 1_800,
            warmup_steps: 1_000,
            train_every: 1,
            target_sync: 1_000,
            batch_size: 32,
            max_episode_steps: 50,
            double_dqn: false,
            loss: LossKind::Huber,
            optimizer: OptimizerConfig {
                learning_rate: 5e-4,
                ..OptimizerConfig::default()
            },
            replay: ReplayConfig::default(),
            conv: default_conv(),
            hidden: 64,
            seed: 0,
        }
    }
}

impl AgentConfig {
    /// Defaults for a variant; V gets no memory.
    pub fn for_variant(variant: Variant) -> Self {
        Self::default().with_variant(variant)
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        if variant == Variant::V {
            self.frame_memory = 0;
            self.action_memory = 0;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if !(0.0..=1.0).contains(&self.epsilon_final)
            || !(0.0..=1.0).contains(&self.epsilon_start)
            || self.epsilon_final > self.epsilon_start
        {
            return bad("epsilon values must satisfy 0 <= final <= start <= 1");
        }
        if !(self.gamma.is_finite() && (0.0..1.0).contains(&self.gamma)) {
            return bad("gamma must lie in [0, 1)");
        }
        if self.variant == Variant::V && (self.frame_memory != 0 || self.action_memory != 0) {
            return bad("variant V uses no frame or action memory");
        }
        if self.episodes == 0 || self.train_every == 0 || self.target_sync == 0 {
            return bad("episodes, train_every and target_sync must be positive");
        }
        if self.batch_size == 0 || self.max_episode_steps == 0 {
            return bad("batch_size and max_episode_steps must be positive");
        }
        if self.batch_size > self.replay.capacity {
            return bad("batch_size exceeds replay capacity");
        }
        self.optimizer.validate()?;
        self.replay.validate()
    }

    pub fn network(&self, obs_height: usize, obs_width: usize) -> QNetConfig {
        QNetConfig {
            conv: self.conv.clone(),
            hidden: self.hidden,
            ..QNetConfig::new(self.variant, self.frame_memory, self.action_memory, obs_height, obs_width)
        }
    }
}

/// Linear decay from `epsilon_start` at episode 0 to `epsilon_final` at a
/// third of `episodes`, constant afterwards.
pub fn epsilon_at(config: &AgentConfig, episode: u64) -> f64 {
    let horizon = config.episodes as f64 / 3.0;
    let t = episode as f64;
    if t >= horizon {
        return config.epsilon_final;
    }
    config.epsilon_start + (config.epsilon_final - config.epsilon_start) * (t / horizon)
}

/// Frames addressed by [`FrameRef`].
pub trait FramePool {
    fn pixels(&self, frame: FrameRef) -> &[f32];
}

impl FramePool for [GridEnvironment] {
    fn pixels(&self, frame: FrameRef) -> &[f32] {
        let env = &self[frame.env as usize];
        env.frame(env.spec().state_at(frame.bin as usize), frame.frame as usize)
    }
}

impl FramePool for Vec<GridEnvironment> {
    fn pixels(&self, frame: FrameRef) -> &[f32] {
        self.as_slice().pixels(frame)
    }
}

/// Most-recent-first buffers of past frames and actions.
#[derive(Debug, Clone)]
pub struct Memory {
    frame_slots: usize,
    action_slots: usize,
    frames: VecDeque<FrameRef>,
    actions: VecDeque<Action>,
}

impl Memory {
    pub fn new(frame_memory: usize, action_memory: usize) -> Self {
        Self {
            frame_slots: frame_memory + 1,
            action_slots: action_memory,
            frames: VecDeque::with_capacity(frame_memory + 1),
            actions: VecDeque::with_capacity(action_memory),
        }
    }

    pub fn reset(&mut self) {
        self.frames.clear();
        self.actions.clear();
    }

    pub fn push_frame(&mut self, frame: FrameRef) {
        if self.frames.len() == self.frame_slots {
            self.frames.pop_back();
        }
        self.frames.push_front(frame);
    }

    pub fn push_action(&mut self, action: Action) {
        if self.action_slots == 0 {
            return;
        }
        if self.actions.len() == self.action_slots {
            self.actions.pop_back();
        }
        self.actions.push_front(action);
    }

    /// `n + 1` slots, current frame first, `None` before the run started.
    pub fn frame_stack(&self) -> Vec<Option<FrameRef>> {
        (0..self.frame_slots).map(|i| self.frames.get(i).copied()).collect()
    }

    pub fn history(&self) -> Vec<Option<Action>> {
        (0..self.action_slots).map(|i| self.actions.get(i).copied()).collect()
    }
}

pub(crate) fn push_state<P: FramePool + ?Sized>(
    batch: &mut QBatch<f32>,
    pool: &P,
    frames: &[Option<FrameRef>],
    history: &[Option<Action>],
    zeros: &[f32],
) {
    let pixels: Vec<&[f32]> = frames
        .iter()
        .map(|f| f.map(|f| pool.pixels(f)).unwrap_or(zeros))
        .collect();
    batch.push(&pixels, history);
}

/// Index of the largest value, lowest index on ties.
pub(crate) fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub targets: Vec<f32>,
    pub td_errors: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct DqnAgent {
    config: AgentConfig,
    online: QNetwork<f32>,
    target: QNetwork<f32>,
    optimizer: Optimizer<f32>,
    updates: u64,
    zeros: Vec<f32>,
}

impl DqnAgent {
    pub fn new<R: Rng + ?Sized>(config: AgentConfig, obs_height: usize, obs_width: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let online = QNetwork::new(config.network(obs_height, obs_width), rng)?;
        Self::from_network(config, online)
    }

    pub fn from_network(config: AgentConfig, online: QNetwork<f32>) -> Result<Self> {
        config.validate()?;
        let h = online.config().obs_height;
        let w = online.config().obs_width;
        if online.config() != &config.network(h, w) {
            return Err(Error::config("network does not match the agent configuration"));
        }
        Ok(Self {
            optimizer: Optimizer::new(config.optimizer)?,
            target: online.clone(),
            online,
            config,
            updates: 0,
            zeros: vec![0.0; h * w],
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn online(&self) -> &QNetwork<f32> {
        &self.online
    }

    pub fn target(&self) -> &QNetwork<f32> {
        &self.target
    }

    pub fn online_mut(&mut self) -> &mut QNetwork<f32> {
        &mut self.online
    }

    pub fn into_online(self) -> QNetwork<f32> {
        self.online
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn sync_target(&mut self) {
        self.target.copy_from(&self.online);
    }

    fn check_inputs(&self, frames: &[Option<FrameRef>], history: &[Option<Action>]) -> Result<()> {
        let c = self.online.config();
        if frames.len() != c.frames() || history.len() != c.action_memory || frames[0].is_none() {
            return Err(Error::input(format!(
                "expected {} frames with a current one and {} past actions, got {} and {}",
                c.frames(),
                c.action_memory,
                frames.len(),
                history.len()
            )));
        }
        Ok(())
    }

    pub fn q_values<P: FramePool + ?Sized>(
        &self,
        pool: &P,
        frames: &[Option<FrameRef>],
        history: &[Option<Action>],
    ) -> Result<Vec<f32>> {
        self.check_inputs(frames, history)?;
        let mut batch = QBatch::with_capacity(self.online.config(), 1);
        push_state(&mut batch, pool, frames, history, &self.zeros);
        self.online.q_batch(&batch)
    }

    /// Epsilon-greedy over the variant's Q actions.
    pub fn select_action<P: FramePool + ?Sized, R: Rng + ?Sized>(
        &self,
        pool: &P,
        frames: &[Option<FrameRef>],
        history: &[Option<Action>],
        epsilon: f64,
        rng: &mut R,
    ) -> Result<Action> {
        self.check_inputs(frames, history)?;
        let actions = self.config.variant.q_actions();
        if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
            return Ok(actions[rng.gen_range(0..actions.len())]);
        }
        let q = self.q_values(pool, frames, history)?;
        Ok(actions[argmax(&q)])
    }

    fn batches<P: FramePool + ?Sized>(&self, pool: &P, batch: &[&StoredTransition]) -> (QBatch<f32>, QBatch<f32>) {
        let c = self.online.config();
        let mut now = QBatch::with_capacity(c, batch.len());
        let mut next = QBatch::with_capacity(c, batch.len());
        for t in batch {
            push_state(&mut now, pool, &t.frames, &t.history, &self.zeros);
            push_state(&mut next, pool, &t.next_frames, &t.next_history, &self.zeros);
        }
        (now, next)
    }

    fn bootstrap_targets(&self, next: &QBatch<f32>, batch: &[&StoredTransition]) -> Result<Vec<f32>> {
        let k = self.online.num_actions();
        let q_target = self.target.q_batch(next)?;
        let q_online = if self.config.double_dqn {
            Some(self.online.q_batch(next)?)
        } else {
            None
        };
        let gamma = self.config.gamma as f32;
        Ok(batch
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let r = t.reward as f32;
                if t.terminal {
                    return r;
                }
                let row = &q_target[i * k..(i + 1) * k];
                let bootstrap = match &q_online {
                    Some(q) => row[argmax(&q[i * k..(i + 1) * k])],
                    None => row.iter().copied().fold(f32::NEG_INFINITY, f32::max),
                };
                r + gamma * bootstrap
            })
            .collect())
    }

    /// Bootstrap targets and TD errors `target - Q_online(s, a)`.
    pub fn compute_targets<P: FramePool + ?Sized>(&self, pool: &P, batch: &[&StoredTransition]) -> Result<Targets> {
        let (now, next) = self.batches(pool, batch);
        let targets = self.bootstrap_targets(&next, batch)?;
        let q = self.online.q_batch(&now)?;
        let k = self.online.num_actions();
        let td_errors = batch
            .iter()
            .enumerate()
            .map(|(i, t)| targets[i] - q[i * k + t.action.index()])
            .collect();
        Ok(Targets { targets, td_errors })
    }

    /// One gradient update from a prioritized batch. Returns the loss.
    pub fn train_step<P: FramePool + ?Sized, R: Rng + ?Sized>(
        &mut self,
        pool: &P,
        replay: &mut PrioritizedReplay<StoredTransition>,
        beta: f64,
        rng: &mut R,
    ) -> Result<f64> {
        let samples = replay.sample(self.config.batch_size, beta, rng)?;
        let indices: Vec<usize> = samples.iter().map(|s| s.index).collect();
        let weights: Vec<f32> = samples.iter().map(|s| s.weight as f32).collect();
        let batch: Vec<&StoredTransition> = samples.iter().map(|s| s.item).collect();
        let actions: Vec<usize> = batch.iter().map(|t| t.action.index()).collect();
        let (now, next) = self.batches(pool, &batch);
        let targets = self.bootstrap_targets(&next, &batch)?;
        let out = self
            .online
            .loss_gradients(&now, &actions, &targets, &weights, self.config.loss)?;
        let td: Vec<f64> = targets
            .iter()
            .zip(&out.q_taken)
            .map(|(y, q)| (y - q) as f64)
            .collect();
        self.optimizer.step(&mut self.online, &out.grads)?;
        replay.update_priorities(&indices, &td)?;
        self.updates += 1;
        if self.updates % self.config.target_sync == 0 {
            self.sync_target();
        }
        Ok(out.loss)
    }
}

pub fn new_replay(config: &AgentConfig) -> Result<PrioritizedReplay<StoredTransition>> {
    PrioritizedReplay::new(config.replay)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epsilon_schedule_endpoints() {
        let config = AgentConfig {
            episodes: 300,
            ..AgentConfig::default()
        };
        assert_eq!(epsilon_at(&config, 0), 1.0);
        assert_eq!(epsilon_at(&config, 100), 0.02);
        assert_eq!(epsilon_at(&config, 300), 0.02);
        assert_eq!(epsilon_at(&config, 10_000), 0.02);
        assert!((epsilon_at(&config, 50) - 0.51).abs() < 1e-12);
    }

    #[test]
    fn variant_v_drops_memory() {
        let c = AgentConfig::for_variant(Variant::V);
        assert_eq!((c.frame_memory, c.action_memory), (0, 0));
        assert!(c.validate().is_ok());
        let bad = AgentConfig {
            variant: Variant::V,
            ..AgentConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn memory_is_most_recent_first_with_padding() {
        let mut m = Memory::new(2, 2);
        let f = |bin| FrameRef { env: 0, bin, frame: 0 };
        m.push_frame(f(1));
        assert_eq!(m.frame_stack(), vec![Some(f(1)), None, None]);
        assert_eq!(m.history(), vec![None, None]);
        m.push_action(Action::Up);
        m.push_frame(f(2));
        m.push_action(Action::Left);
        m.push_frame(f(3));
        m.push_frame(f(4));
        assert_eq!(m.frame_stack(), vec![Some(f(4)), Some(f(3)), Some(f(2))]);
        assert_eq!(m.history(), vec![Some(Action::Left), Some(Action::Up)]);
    }

    #[test]
    fn bad_config_values_rejected() {
        for c in [
            AgentConfig { gamma: 1.0, ..AgentConfig::default() },
            AgentConfig { epsilon_final: 0.5, epsilon_start: 0.1, ..AgentConfig::default() },
            AgentConfig { batch_size: 0, ..AgentConfig::default() },
        ] {
            assert!(c.validate().is_err());
        }
    }
}
