use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{epsilon_at, new_replay, AgentConfig, DqnAgent, Memory};
use crate::env::{Action, EnvState, GridEnvironment};
use crate::error::{Error, Result};
use crate::nn::QNetwork;
use crate::replay::{FrameRef, StoredTransition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Stopped,
    /// MS variant only: the goal was entered, where the stop classifier takes over.
    ReachedGoal,
    StepCap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStep {
    pub state: EnvState,
    pub action: Action,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub env: usize,
    pub start: EnvState,
    pub steps: Vec<EpisodeStep>,
    pub termination: Termination,
    pub total_reward: f64,
}

/// One line of the training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub episode: usize,
    pub steps: usize,
    pub total_reward: f64,
    /// Mean loss of the updates made during the episode.
    pub loss: Option<f64>,
    /// Exploration rate used throughout the episode.
    pub epsilon: f64,
}

pub struct TrainOutcome {
    pub network: QNetwork<f32>,
    pub episodes: Vec<EpisodeLog>,
    pub curve: Vec<CurveRow>,
    /// Update counts at which the target network was refreshed.
    pub syncs: Vec<u64>,
    pub updates: u64,
    pub env_steps: u64,
}

impl TrainOutcome {
    pub fn write_curve(&self, path: &Path) -> Result<()> {
        write_curve(&self.curve, path)
    }
}

pub fn write_curve(rows: &[CurveRow], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn frame_ref(env: usize, env_ref: &GridEnvironment, state: EnvState, frame: usize) -> FrameRef {
    FrameRef {
        env: env as u32,
        bin: env_ref.spec().bin_index(state) as u32,
        frame: frame as u32,
    }
}

/// Trains a DQN agent on `envs`. `progress` sees every finished episode.
pub fn train(
    envs: &[GridEnvironment],
    config: &AgentConfig,
    mut progress: impl FnMut(&CurveRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    let first = envs.first().ok_or_else(|| Error::input("training needs at least one environment"))?;
    let spec = *first.spec();
    if envs.iter().any(|e| e.spec() != &spec) {
        return Err(Error::input("training environments must share one grid spec"));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    init_rng.set_stream(1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let mut agent = DqnAgent::new(config.clone(), spec.obs_height, spec.obs_width, &mut init_rng)?;
    let mut replay = new_replay(config)?;
    let mut memory = Memory::new(config.frame_memory, config.action_memory);
    let mut episodes = Vec::new();
    let mut curve = Vec::new();
    let mut syncs = Vec::new();
    let mut step: u64 = 0;
    let ends_on_goal = config.variant.uses_stop_classifier();

    for episode in 0..config.episodes {
        let env_index = rng.gen_range(0..envs.len());
        let env = &envs[env_index];
        let mut state = spec.state_at(rng.gen_range(0..spec.num_bins()));
        let start = state;
        memory.reset();
        let obs = env.observe(state, &mut rng)?;
        memory.push_frame(frame_ref(env_index, env, state, obs.frame_index));
        let epsilon = epsilon_at(config, episode);
        let beta = config.replay.beta_at(episode as f64 / config.episodes as f64);
        let mut log = Vec::with_capacity(config.max_episode_steps);
        let mut termination = Termination::StepCap;
        let (mut loss_sum, mut loss_count) = (0.0, 0usize);
        let steps = if ends_on_goal && env.is_goal(state) {
            termination = Termination::ReachedGoal;
            0
        } else {
            config.max_episode_steps
        };

        for _ in 0..steps {
            let frames = memory.frame_stack();
            let history = memory.history();
            let action = agent.select_action(envs, &frames, &history, epsilon, &mut rng)?;
            let mut outcome = env.step(state, action)?;
            let reached = ends_on_goal && env.is_goal(outcome.next_state);
            outcome.terminal |= reached;
            memory.push_action(action);
            if !outcome.terminal {
                let obs = env.observe(outcome.next_state, &mut rng)?;
                memory.push_frame(frame_ref(env_index, env, outcome.next_state, obs.frame_index));
            }
            replay.push(StoredTransition {
                frames,
                history,
                action,
                reward: outcome.reward,
                next_frames: memory.frame_stack(),
                next_history: memory.history(),
                terminal: outcome.terminal,
            });
            log.push(EpisodeStep {
                state,
                action,
                reward: outcome.reward,
            });
            step += 1;

            if step >= config.warmup_steps && step % config.train_every == 0 && replay.len() >= config.batch_size {
                let before = agent.updates();
                let loss = agent.train_step(envs, &mut replay, beta, &mut rng)?;
                if (before + 1) % config.target_sync == 0 {
                    syncs.push(agent.updates());
                }
                loss_sum += loss;
                loss_count += 1;
            }
            state = outcome.next_state;
            if outcome.terminal {
                termination = if reached { Termination::ReachedGoal } else { Termination::Stopped };
                break;
            }
        }

        let total_reward = log.iter().map(|s| s.reward).sum();
        let row = CurveRow {
            episode: episode as usize,
            steps: log.len(),
            total_reward,
            loss: (loss_count > 0).then(|| loss_sum / loss_count as f64),
            epsilon,
        };
        progress(&row);
        curve.push(row);
        episodes.push(EpisodeLog {
            env: env_index,
            start,
            steps: log,
            termination,
            total_reward,
        });
    }

    let updates = agent.updates();
    Ok(TrainOutcome {
        network: agent.into_online(),
        episodes,
        curve,
        syncs,
        updates,
        env_steps: step,
    })
}
