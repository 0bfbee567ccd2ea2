//! Tabular Q-learning on the fully observable grid, used as a verification
//! oracle on tiny instances. Observations are ignored.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Action, EnvState, GridEnvironment, GridSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct TabularConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub episodes: usize,
    pub epsilon: f64,
    pub max_episode_steps: usize,
    pub seed: u64,
}

impl Default for TabularConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            gamma: 0.9,
            episodes: 2_000,
            epsilon: 0.3,
            max_episode_steps: 50,
            seed: 0,
        }
    }
}

/// Q-values for every (state, action) pair, row-major over states.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    spec: GridSpec,
    values: Vec<f64>,
}

impl QTable {
    pub fn zeros(spec: GridSpec) -> Self {
        Self {
            spec,
            values: vec![0.0; spec.num_bins() * Action::COUNT],
        }
    }

    pub fn get(&self, state: EnvState, action: Action) -> f64 {
        self.values[self.spec.bin_index(state) * Action::COUNT + action.index()]
    }

    fn get_mut(&mut self, state: EnvState, action: Action) -> &mut f64 {
        &mut self.values[self.spec.bin_index(state) * Action::COUNT + action.index()]
    }

    pub fn row(&self, state: EnvState) -> &[f64] {
        let start = self.spec.bin_index(state) * Action::COUNT;
        &self.values[start..start + Action::COUNT]
    }

    pub fn max(&self, state: EnvState) -> f64 {
        self.row(state).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Greedy action; ties go to the lowest action index.
    pub fn greedy(&self, state: EnvState) -> Action {
        let row = self.row(state);
        let mut best = 0;
        for (i, &q) in row.iter().enumerate() {
            if q > row[best] {
                best = i;
            }
        }
        Action::ALL[best]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Epsilon-greedy tabular Q-learning with the one-step update
/// `Q(s,a) += alpha * (r + gamma * max_a' Q(s',a') - Q(s,a))`, bootstrapping
/// only on non-terminal transitions.
pub fn tabular_q_learning(env: &GridEnvironment, config: &TabularConfig) -> Result<QTable> {
    let TabularConfig {
        alpha,
        gamma,
        epsilon,
        ..
    } = *config;
    if !alpha.is_finite() || !gamma.is_finite() || !epsilon.is_finite() {
        return Err(Error::input("tabular Q-learning hyperparameters must be finite"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::input(format!("alpha {alpha} outside [0, 1]")));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::input(format!("gamma {gamma} outside [0, 1)")));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::input(format!("epsilon {epsilon} outside [0, 1]")));
    }

    let spec = *env.spec();
    let mut table = QTable::zeros(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for _ in 0..config.episodes {
        let mut state = spec.state_at(rng.gen_range(0..spec.num_bins()));
        for _ in 0..config.max_episode_steps {
            let action = if rng.gen::<f64>() < epsilon {
                Action::ALL[rng.gen_range(0..Action::COUNT)]
            } else {
                table.greedy(state)
            };
            let outcome = env.step(state, action)?;
            let bootstrap = if outcome.terminal {
                0.0
            } else {
                gamma * table.max(outcome.next_state)
            };
            let q = table.get_mut(state, action);
            *q += alpha * (outcome.reward + bootstrap - *q);
            if outcome.terminal {
                break;
            }
            state = outcome.next_state;
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::tests::line_env;

    #[test]
    fn two_state_values_converge() {
        let env = line_env(1, 2, &[(0, 1)]);
        let config = TabularConfig {
            gamma: 0.9,
            episodes: 3_000,
            ..Default::default()
        };
        let table = tabular_q_learning(&env, &config).unwrap();
        let right = table.get(EnvState::new(0, 0), Action::Right);
        assert!((right - 0.95).abs() < 0.02, "Q(0, right) = {right}");
        let stop = table.get(EnvState::new(0, 1), Action::Stop);
        assert!((stop - 1.0).abs() < 0.01, "Q(goal, stop) = {stop}");
    }

    #[test]
    fn zero_learning_rate_leaves_table_untouched() {
        let env = line_env(1, 3, &[(0, 2)]);
        let config = TabularConfig {
            alpha: 0.0,
            episodes: 100,
            ..Default::default()
        };
        let table = tabular_q_learning(&env, &config).unwrap();
        assert_eq!(table, QTable::zeros(*env.spec()));
    }

    #[test]
    fn non_finite_hyperparameters_rejected() {
        let env = line_env(1, 3, &[(0, 2)]);
        for cfg in [
            TabularConfig { alpha: f64::NAN, ..Default::default() },
            TabularConfig { gamma: f64::INFINITY, ..Default::default() },
        ] {
            assert!(matches!(tabular_q_learning(&env, &cfg), Err(Error::Input(_))));
        }
    }

    #[test]
    fn greedy_policy_reaches_goal_from_every_start() {
        let env = line_env(3, 4, &[(2, 3)]);
        let config = TabularConfig {
            episodes: 5_000,
            ..Default::default()
        };
        let table = tabular_q_learning(&env, &config).unwrap();
        for start in env.spec().states() {
            let mut state = start;
            let mut stopped = false;
            for _ in 0..20 {
                let action = table.greedy(state);
                let outcome = env.step(state, action).unwrap();
                if outcome.terminal {
                    stopped = env.is_goal(state);
                    break;
                }
                state = outcome.next_state;
            }
            assert!(stopped, "no correct stop from {start}");
        }
    }
}
