//! The navigation grid: a partially observable MDP whose states are probe
//! positions and whose observations are image frames recorded at those
//! positions.

mod container;
mod tabular;

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use container::{CONTAINER_MAGIC, CONTAINER_VERSION};
pub use tabular::{tabular_q_learning, QTable, TabularConfig};

/// Reward table of the navigation task.
pub mod reward {
    pub const MOVE_CLOSER: f64 = 0.05;
    pub const MOVE_AWAY: f64 = -0.1;
    pub const CORRECT_STOP: f64 = 1.0;
    pub const INCORRECT_STOP: f64 = -0.25;

    pub const ALL: [f64; 4] = [MOVE_CLOSER, MOVE_AWAY, CORRECT_STOP, INCORRECT_STOP];
}

/// Geometry of a subject grid and of the frames stored in it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub frames_per_bin: usize,
    pub obs_height: usize,
    pub obs_width: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            rows: 11,
            cols: 15,
            frames_per_bin: 5,
            obs_height: 64,
            obs_width: 64,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("rows", self.rows),
            ("cols", self.cols),
            ("frames_per_bin", self.frames_per_bin),
            ("obs_height", self.obs_height),
            ("obs_width", self.obs_width),
        ];
        for (name, value) in fields {
            if value == 0 {
                return Err(Error::input(format!("grid spec {name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.rows * self.cols
    }

    pub fn frame_len(&self) -> usize {
        self.obs_height * self.obs_width
    }

    pub fn contains(&self, state: EnvState) -> bool {
        state.row < self.rows && state.col < self.cols
    }

    /// Row-major bin index of a state.
    pub fn bin_index(&self, state: EnvState) -> usize {
        state.row * self.cols + state.col
    }

    pub fn state_at(&self, bin: usize) -> EnvState {
        EnvState::new(bin / self.cols, bin % self.cols)
    }

    /// All states in row-major order.
    pub fn states(&self) -> impl Iterator<Item = EnvState> + '_ {
        (0..self.num_bins()).map(|bin| self.state_at(bin))
    }

    fn check(&self, state: EnvState) -> Result<()> {
        if self.contains(state) {
            Ok(())
        } else {
            Err(Error::input(format!(
                "state {state} outside {}x{} grid",
                self.rows, self.cols
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EnvState {
    pub row: usize,
    pub col: usize,
}

impl EnvState {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

impl fmt::Display for EnvState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

/// Probe actions. The discriminant is the action's index in Q-value vectors
/// and one-hot encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
    Stop = 4,
}

impl Action {
    pub const COUNT: usize = 5;
    pub const ALL: [Action; 5] = [
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
        Action::Stop,
    ];
    pub const MOVES: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Action> {
        Action::ALL.get(index).copied()
    }

    pub fn is_move(self) -> bool {
        self != Action::Stop
    }

    pub fn one_hot(self) -> [f32; Action::COUNT] {
        let mut v = [0.0; Action::COUNT];
        v[self.index()] = 1.0;
        v
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Up => "up",
            Action::Down => "down",
            Action::Left => "left",
            Action::Right => "right",
            Action::Stop => "stop",
        }
    }

    fn offset(self) -> (isize, isize) {
        match self {
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
            Action::Stop => (0, 0),
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub next_state: EnvState,
    pub reward: f64,
    pub terminal: bool,
}

/// A frame drawn from a bin's observation bank.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub frame_index: usize,
    pub pixels: &'a [f32],
}

/// One subject's grid with its per-bin frame banks and goal region.
///
/// Immutable after construction; all randomness is supplied by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct GridEnvironment {
    spec: GridSpec,
    subject_id: String,
    goal_mask: Vec<bool>,
    /// Bin-major, then frame, then row-major pixels.
    frames: Vec<f32>,
    distances: Vec<usize>,
}

impl GridEnvironment {
    pub fn new(
        spec: GridSpec,
        subject_id: impl Into<String>,
        goal_mask: Vec<bool>,
        frames: Vec<f32>,
    ) -> Result<Self> {
        spec.validate()?;
        let subject_id = subject_id.into();
        if goal_mask.len() != spec.num_bins() {
            return Err(Error::input(format!(
                "goal mask has {} entries, grid has {} bins",
                goal_mask.len(),
                spec.num_bins()
            )));
        }
        if !goal_mask.iter().any(|&g| g) {
            return Err(Error::input(format!(
                "environment {subject_id} has no goal bin"
            )));
        }
        let expected = spec.num_bins() * spec.frames_per_bin * spec.frame_len();
        if frames.len() != expected {
            return Err(Error::input(format!(
                "observation banks hold {} values, expected {} ({} bins x {} frames x {}x{})",
                frames.len(),
                expected,
                spec.num_bins(),
                spec.frames_per_bin,
                spec.obs_height,
                spec.obs_width
            )));
        }
        if let Some(pos) = frames
            .iter()
            .position(|v| !v.is_finite() || !(0.0..=1.0).contains(v))
        {
            let per_bin = spec.frames_per_bin * spec.frame_len();
            let state = spec.state_at(pos / per_bin);
            return Err(Error::input(format!(
                "intensity {} at bin {state}, frame {} is outside [0, 1]",
                frames[pos],
                (pos % per_bin) / spec.frame_len()
            )));
        }
        let goals: Vec<EnvState> = spec
            .states()
            .filter(|s| goal_mask[spec.bin_index(*s)])
            .collect();
        let distances = spec
            .states()
            .map(|s| {
                goals
                    .iter()
                    .map(|g| g.row.abs_diff(s.row) + g.col.abs_diff(s.col))
                    .min()
                    .unwrap_or(0)
            })
            .collect();
        Ok(Self {
            spec,
            subject_id,
            goal_mask,
            frames,
            distances,
        })
    }

    /// Builds an environment by rendering every frame with `render(state, frame_index)`.
    pub fn from_fn(
        spec: GridSpec,
        subject_id: impl Into<String>,
        goal_mask: Vec<bool>,
        mut render: impl FnMut(EnvState, usize) -> Vec<f32>,
    ) -> Result<Self> {
        spec.validate()?;
        let mut frames = Vec::with_capacity(spec.num_bins() * spec.frames_per_bin * spec.frame_len());
        for state in spec.states() {
            for k in 0..spec.frames_per_bin {
                let frame = render(state, k);
                if frame.len() != spec.frame_len() {
                    return Err(Error::input(format!(
                        "rendered frame has {} pixels, expected {}",
                        frame.len(),
                        spec.frame_len()
                    )));
                }
                frames.extend_from_slice(&frame);
            }
        }
        Self::new(spec, subject_id, goal_mask, frames)
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn goal_mask(&self) -> &[bool] {
        &self.goal_mask
    }

    pub fn frames(&self) -> &[f32] {
        &self.frames
    }

    pub fn is_goal(&self, state: EnvState) -> bool {
        self.spec.contains(state) && self.goal_mask[self.spec.bin_index(state)]
    }

    pub fn goal_states(&self) -> impl Iterator<Item = EnvState> + '_ {
        self.spec.states().filter(|s| self.is_goal(*s))
    }

    /// Minimum Manhattan distance from `state` to any goal bin.
    pub fn goal_distance(&self, state: EnvState) -> Result<usize> {
        self.spec.check(state)?;
        Ok(self.distances[self.spec.bin_index(state)])
    }

    /// Where a movement lands; moves off the grid leave the probe in place.
    pub fn translate(&self, state: EnvState, action: Action) -> EnvState {
        let (dr, dc) = action.offset();
        let row = state.row as isize + dr;
        let col = state.col as isize + dc;
        if row < 0 || col < 0 || row >= self.spec.rows as isize || col >= self.spec.cols as isize {
            state
        } else {
            EnvState::new(row as usize, col as usize)
        }
    }

    pub fn step(&self, state: EnvState, action: Action) -> Result<StepOutcome> {
        self.spec.check(state)?;
        if action == Action::Stop {
            let reward = if self.is_goal(state) {
                reward::CORRECT_STOP
            } else {
                reward::INCORRECT_STOP
            };
            return Ok(StepOutcome {
                next_state: state,
                reward,
                terminal: true,
            });
        }
        let next_state = self.translate(state, action);
        let before = self.distances[self.spec.bin_index(state)];
        let after = self.distances[self.spec.bin_index(next_state)];
        let reward = if after < before {
            reward::MOVE_CLOSER
        } else {
            reward::MOVE_AWAY
        };
        Ok(StepOutcome {
            next_state,
            reward,
            terminal: false,
        })
    }

    /// Whether `action` taken in `state` counts as a correct decision: a move
    /// that strictly shortens the goal distance, or a stop on a goal bin.
    pub fn is_correct_action(&self, state: EnvState, action: Action) -> Result<bool> {
        self.spec.check(state)?;
        if action == Action::Stop {
            return Ok(self.is_goal(state));
        }
        let next = self.translate(state, action);
        Ok(self.distances[self.spec.bin_index(next)] < self.distances[self.spec.bin_index(state)])
    }

    pub fn frame(&self, state: EnvState, frame_index: usize) -> &[f32] {
        let len = self.spec.frame_len();
        let start = (self.spec.bin_index(state) * self.spec.frames_per_bin + frame_index) * len;
        &self.frames[start..start + len]
    }

    /// Draws one frame of the bin's bank uniformly at random.
    pub fn observe<R: Rng + ?Sized>(&self, state: EnvState, rng: &mut R) -> Result<Observation<'_>> {
        self.spec.check(state)?;
        let frame_index = if self.spec.frames_per_bin == 1 {
            0
        } else {
            rng.gen_range(0..self.spec.frames_per_bin)
        };
        Ok(Observation {
            frame_index,
            pixels: self.frame(state, frame_index),
        })
    }
}
