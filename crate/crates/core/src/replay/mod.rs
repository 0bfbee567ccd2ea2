//! Proportional prioritized experience replay.

mod sumtree;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use sumtree::SumTree;
use sumtree::MaxTree;

use crate::env::Action;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplayConfig {
    /// Number of slots; must be a power of two.
    pub capacity: usize,
    /// Priority exponent applied when sampling.
    pub alpha: f64,
    /// Importance-sampling exponent at the start of training.
    pub beta_start: f64,
    pub beta_end: f64,
    /// Added to `|TD|` so no priority reaches zero.
    pub epsilon: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            capacity: 1 << 15,
            alpha: 0.6,
            beta_start: 0.4,
            beta_end: 1.0,
            epsilon: 1e-3,
        }
    }
}

impl ReplayConfig {
    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 || !self.capacity.is_power_of_two() {
            return Err(Error::config(format!("replay capacity {} must be a power of two", self.capacity)));
        }
        let unit = |x: f64| x.is_finite() && (0.0..=1.0).contains(&x);
        if !(self.alpha.is_finite() && self.alpha >= 0.0) || !unit(self.beta_start) || !unit(self.beta_end) {
            return Err(Error::config("replay exponents out of range"));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::config("replay epsilon must be positive"));
        }
        Ok(())
    }

    /// Linear anneal of the importance exponent over `fraction` in [0, 1].
    pub fn beta_at(&self, fraction: f64) -> f64 {
        let f = fraction.clamp(0.0, 1.0);
        self.beta_start + (self.beta_end - self.beta_start) * f
    }
}

/// Location of one frame in the environment pool: environment index, bin
/// index and frame within the bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FrameRef {
    pub env: u32,
    pub bin: u32,
    pub frame: u32,
}

/// A transition with observations stored as frame references. Stacks and
/// histories are ordered most recent first; `None` marks zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTransition {
    pub frames: Vec<Option<FrameRef>>,
    pub history: Vec<Option<Action>>,
    pub action: Action,
    pub reward: f64,
    pub next_frames: Vec<Option<FrameRef>>,
    pub next_history: Vec<Option<Action>>,
    pub terminal: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct Sample<'a, T> {
    pub index: usize,
    pub item: &'a T,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct PrioritizedReplay<T> {
    config: ReplayConfig,
    items: Vec<T>,
    raw: Vec<f64>,
    /// Holds `raw^alpha` per slot.
    weights: SumTree,
    max_raw: MaxTree,
    cursor: usize,
}

impl<T> PrioritizedReplay<T> {
    pub fn new(config: ReplayConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            items: Vec::new(),
            raw: Vec::new(),
            weights: SumTree::new(config.capacity)?,
            max_raw: MaxTree::new(config.capacity),
            cursor: 0,
        })
    }

    pub fn config(&self) -> &ReplayConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.config.capacity
    }

    pub fn get(&self, index: usize) -> Option<&T> {
        self.items.get(index)
    }

    /// Stored (exponent-free) priority of a slot.
    pub fn priority(&self, index: usize) -> Option<f64> {
        self.raw.get(index).copied()
    }

    /// Sum of `priority^alpha` over all stored slots.
    pub fn total(&self) -> f64 {
        self.weights.total()
    }

    pub fn tree(&self) -> &SumTree {
        &self.weights
    }

    fn set_priority(&mut self, index: usize, priority: f64) {
        self.raw[index] = priority;
        self.max_raw.set(index, priority);
        self.weights
            .set(index, priority.powf(self.config.alpha))
            .expect("priority validated by caller");
    }

    /// Inserts at the current maximum priority (1.0 when empty), overwriting
    /// the oldest slot once full. Returns the slot index.
    pub fn push(&mut self, item: T) -> usize {
        let priority = if self.is_empty() { 1.0 } else { self.max_raw.max() };
        let index = self.cursor;
        if index == self.items.len() {
            self.items.push(item);
            self.raw.push(priority);
        } else {
            self.items[index] = item;
        }
        self.set_priority(index, priority);
        self.cursor = (self.cursor + 1) % self.config.capacity;
        index
    }

    /// Draws `k` slots with probability proportional to `priority^alpha`,
    /// one from each of `k` equal-mass strata. Importance weights
    /// `(N * P(i))^-beta` are divided by the largest weight in the batch.
    pub fn sample<R: Rng + ?Sized>(&self, k: usize, beta: f64, rng: &mut R) -> Result<Vec<Sample<'_, T>>> {
        if k == 0 || k > self.len() {
            return Err(Error::input(format!("cannot draw {k} samples from {} stored", self.len())));
        }
        let total = self.weights.total();
        let n = self.len() as f64;
        let stratum = total / k as f64;
        let mut out = Vec::with_capacity(k);
        for j in 0..k {
            let mass = stratum * (j as f64 + rng.gen::<f64>());
            let index = self.weights.find(mass).min(self.len() - 1);
            let p = self.weights.get(index) / total;
            let weight = (n * p).powf(-beta);
            out.push(Sample {
                index,
                item: &self.items[index],
                weight,
            });
        }
        let max = out.iter().map(|s| s.weight).fold(0.0, f64::max);
        for s in &mut out {
            s.weight /= max;
        }
        Ok(out)
    }

    /// Sets each slot's priority to `|td| + epsilon`.
    pub fn update_priorities(&mut self, indices: &[usize], td_errors: &[f64]) -> Result<()> {
        if indices.len() != td_errors.len() {
            return Err(Error::input("one TD error per index required"));
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::input(format!("replay index {i} out of range for {} stored", self.len())));
        }
        if td_errors.iter().any(|td| !td.is_finite()) {
            return Err(Error::input("TD errors must be finite"));
        }
        for (&i, &td) in indices.iter().zip(td_errors) {
            self.set_priority(i, td.abs() + self.config.epsilon);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn buffer(capacity: usize, alpha: f64) -> PrioritizedReplay<u32> {
        PrioritizedReplay::new(ReplayConfig {
            capacity,
            alpha,
            ..ReplayConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn first_push_has_unit_priority() {
        let mut b = buffer(8, 0.6);
        b.push(7);
        assert_eq!(b.len(), 1);
        assert_eq!(b.total(), 1.0);
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut b = buffer(4, 0.6);
        for i in 0..5 {
            b.push(i);
        }
        assert_eq!(b.len(), 4);
        assert_eq!(b.get(0), Some(&4));
        assert_eq!(b.get(1), Some(&1));
    }

    #[test]
    fn new_entries_take_current_max() {
        let mut b = buffer(4, 1.0);
        b.push(0);
        b.push(1);
        b.update_priorities(&[0, 1], &[2.0, -0.5]).unwrap();
        let i = b.push(2);
        assert_eq!(b.priority(i), Some(2.0 + 1e-3));
        // Lowering the maximum lowers what new entries receive.
        b.update_priorities(&[0, 2], &[0.0, 0.0]).unwrap();
        let j = b.push(3);
        assert_eq!(b.priority(j), Some(0.5 + 1e-3));
    }

    #[test]
    fn zero_td_keeps_floor_priority() {
        let mut b = buffer(4, 0.6);
        b.push(0);
        b.update_priorities(&[0], &[0.0]).unwrap();
        assert_eq!(b.priority(0), Some(1e-3));
        assert!(b.update_priorities(&[1], &[0.0]).is_err());
    }

    #[test]
    fn oversized_sample_rejected() {
        let mut b = buffer(4, 0.6);
        b.push(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(b.sample(2, 0.4, &mut rng).is_err());
        assert!(b.sample(1, 0.4, &mut rng).is_ok());
    }

    #[test]
    fn beta_zero_gives_unit_weights() {
        let mut b = buffer(8, 1.0);
        for i in 0..6 {
            b.push(i);
        }
        b.update_priorities(&[0, 1, 2], &[5.0, 0.1, 2.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in b.sample(4, 0.0, &mut rng).unwrap() {
            assert_eq!(s.weight, 1.0);
        }
    }

    #[test]
    fn stratified_batch_covers_every_stratum() {
        let mut b = buffer(8, 1.0);
        for i in 0..4 {
            b.push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // Equal priorities: each of 4 strata maps to exactly one slot.
        let mut idx: Vec<usize> = b.sample(4, 0.4, &mut rng).unwrap().iter().map(|s| s.index).collect();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2, 3]);
    }
}
