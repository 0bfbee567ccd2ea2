use serde::{Deserialize, Serialize};

use super::{Parameters, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Rescale the whole gradient when its L2 norm exceeds this; 0 disables.
    pub max_grad_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_grad_norm: 10.0,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            max_grad_norm: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate.is_finite()
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.max_grad_norm.is_finite()
            && self.max_grad_norm >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First-order optimizer with per-parameter state.
#[derive(Debug, Clone)]
pub struct Optimizer<S> {
    config: OptimizerConfig,
    step: u64,
    first: Vec<Vec<S>>,
    second: Vec<Vec<S>>,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<P: Parameters<S>>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let grads = grads.blocks();
        let mut params = params.blocks_mut();
        if grads.len() != params.len() || grads.iter().zip(&params).any(|(g, p)| g.len() != p.len()) {
            return Err(Error::input("gradient shapes do not match the parameters"));
        }
        if self.first.is_empty() && self.config.kind == OptimizerKind::Adam {
            self.first = grads.iter().map(|g| vec![S::zero(); g.len()]).collect();
            self.second = self.first.clone();
        }
        let mut scale = 1.0;
        if self.config.max_grad_norm > 0.0 {
            let limit = self.config.max_grad_norm;
            let norm = grads
                .iter()
                .flat_map(|g| g.iter())
                .map(|&g| g.to_f64() * g.to_f64())
                .sum::<f64>()
                .sqrt();
            if norm > limit {
                scale = limit / norm;
            }
        }
        let scale = S::lit(scale);
        self.step += 1;
        let lr = S::lit(self.config.learning_rate);
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(&grads) {
                    for (p, &g) in p.iter_mut().zip(g.iter()) {
                        *p = *p - lr * g * scale;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (S::lit(self.config.beta1), S::lit(self.config.beta2));
                let t = self.step as i32;
                let c1 = S::one() - b1.powi(t);
                let c2 = S::one() - b2.powi(t);
                let eps = S::lit(self.config.epsilon);
                for (i, (p, g)) in params.iter_mut().zip(&grads).enumerate() {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for j in 0..p.len() {
                        let g = g[j] * scale;
                        m[j] = b1 * m[j] + (S::one() - b1) * g;
                        v[j] = b2 * v[j] + (S::one() - b2) * g * g;
                        let m_hat = m[j] / c1;
                        let v_hat = v[j] / c2;
                        p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
