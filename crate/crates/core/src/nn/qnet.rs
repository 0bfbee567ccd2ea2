use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{check_finite, validate_geometry, ConvSpec, ConvStack, Dense, StackCache};
use super::{Parameters, Scalar, Tensor};
use crate::env::Action;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    V,
    M,
    Ms,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::V, Variant::M, Variant::Ms];

    pub fn label(self) -> &'static str {
        match self {
            Variant::V => "V-DQN",
            Variant::M => "M-DQN",
            Variant::Ms => "MS-DQN",
        }
    }

    /// Number of Q outputs. MS drops stop from the head.
    pub fn num_q_actions(self) -> usize {
        match self {
            Variant::Ms => 4,
            _ => Action::COUNT,
        }
    }

    pub fn q_actions(self) -> &'static [Action] {
        match self {
            Variant::Ms => &Action::MOVES,
            _ => &Action::ALL,
        }
    }

    pub fn uses_stop_classifier(self) -> bool {
        self == Variant::Ms
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Variant::V => b'V',
            Variant::M => b'M',
            Variant::Ms => b'S',
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.tag() == tag)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v" | "v-dqn" => Ok(Variant::V),
            "m" | "m-dqn" => Ok(Variant::M),
            "ms" | "ms-dqn" => Ok(Variant::Ms),
            other => Err(Error::config(format!("unknown variant {other:?}, expected v, m or ms"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

pub fn default_conv() -> Vec<ConvSpec> {
    vec![
        ConvSpec { channels: 16, kernel: 4, stride: 4 },
        ConvSpec { channels: 16, kernel: 3, stride: 2 },
        ConvSpec { channels: 16, kernel: 3, stride: 1 },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QNetConfig {
    pub variant: Variant,
    /// Number of past frames stacked with the current one.
    pub frame_memory: usize,
    /// Number of past actions fed to the advantage head.
    pub action_memory: usize,
    pub obs_height: usize,
    pub obs_width: usize,
    pub conv: Vec<ConvSpec>,
    pub hidden: usize,
}

impl QNetConfig {
    pub fn new(variant: Variant, frame_memory: usize, action_memory: usize, obs_height: usize, obs_width: usize) -> Self {
        Self {
            variant,
            frame_memory,
            action_memory,
            obs_height,
            obs_width,
            conv: default_conv(),
            hidden: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant == Variant::V && (self.frame_memory != 0 || self.action_memory != 0) {
            return Err(Error::config("variant V takes no frame or action memory"));
        }
        if self.hidden == 0 {
            return Err(Error::config("hidden width must be positive"));
        }
        validate_geometry(self.frame_memory + 1, self.obs_height, self.obs_width, &self.conv)
    }

    pub fn frames(&self) -> usize {
        self.frame_memory + 1
    }

    pub fn history_len(&self) -> usize {
        self.action_memory * Action::COUNT
    }

    pub fn input_len(&self) -> usize {
        self.frames() * self.obs_height * self.obs_width
    }
}

/// Dense hidden layer followed by a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<S> {
    pub hidden: Dense<S>,
    pub out: Dense<S>,
}

pub(crate) struct HeadCache<S> {
    hidden: Vec<S>,
    pub(crate) out: Vec<S>,
}

impl<S: Scalar> Head<S> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, hidden: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            hidden: Dense::new(inputs, hidden, 1.0, rng),
            out: Dense::new(hidden, outputs, 0.5, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            hidden: self.hidden.zeros_like(),
            out: self.out.zeros_like(),
        }
    }

    pub(crate) fn forward(&self, x: &[S], batch: usize, name: &str) -> Result<HeadCache<S>> {
        let hidden = self.hidden.forward(x, batch, true);
        check_finite(&hidden, &format!("{name}.hidden"))?;
        let out = self.out.forward(&hidden, batch, false);
        check_finite(&out, &format!("{name}.out"))?;
        Ok(HeadCache { hidden, out })
    }

    pub(crate) fn backward(&self, x: &[S], cache: &HeadCache<S>, d_out: &mut [S], batch: usize, grads: &mut Head<S>) -> Vec<S> {
        let mut d_hidden = self
            .out
            .backward(&cache.hidden, None, d_out, batch, &mut grads.out, true)
            .expect("input gradient requested");
        self.hidden
            .backward(x, Some(&cache.hidden), &mut d_hidden, batch, &mut grads.hidden, true)
            .expect("input gradient requested")
    }

    pub(crate) fn blocks(&self) -> Vec<&[S]> {
        self.hidden.blocks().into_iter().chain(self.out.blocks()).collect()
    }

    pub(crate) fn blocks_mut(&mut self) -> Vec<&mut [S]> {
        let Head { hidden, out } = self;
        hidden.blocks_mut().into_iter().chain(out.blocks_mut()).collect()
    }

    pub(crate) fn block_shapes(&self) -> Vec<Vec<usize>> {
        self.hidden.block_shapes().into_iter().chain(self.out.block_shapes()).collect()
    }
}

/// `Q_a = A_a - mean(A) + V`.
pub fn dueling_combine<S: Scalar>(advantages: &[S], value: S) -> Vec<S> {
    let mean = advantages.iter().copied().sum::<S>() / S::lit(advantages.len() as f64);
    advantages.iter().map(|&a| a - mean + value).collect()
}

/// Inputs for a batch of states: stacked frames `[batch, n+1, h, w]` and
/// action histories `[batch, m * 5]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QBatch<S> {
    pub len: usize,
    pub frames: Vec<S>,
    pub history: Vec<S>,
}

impl<S: Scalar> QBatch<S> {
    pub fn with_capacity(config: &QNetConfig, capacity: usize) -> Self {
        Self {
            len: 0,
            frames: Vec::with_capacity(capacity * config.input_len()),
            history: Vec::with_capacity(capacity * config.history_len()),
        }
    }

    /// Appends one state. `frames` are ordered current first; `history`
    /// holds the most recent action first, `None` for padding.
    pub fn push(&mut self, frames: &[&[f32]], history: &[Option<Action>]) {
        for f in frames {
            self.frames.extend(f.iter().map(|&p| S::lit(p as f64)));
        }
        for slot in history {
            let one_hot = slot.map(|a| a.one_hot()).unwrap_or([0.0; Action::COUNT]);
            self.history.extend(one_hot.iter().map(|&x| S::lit(x as f64)));
        }
        self.len += 1;
    }

    fn check(&self, config: &QNetConfig) -> Result<()> {
        if self.frames.len() != self.len * config.input_len() || self.history.len() != self.len * config.history_len() {
            return Err(Error::input(format!(
                "batch of {} holds {} pixel and {} history values, expected {} and {} per state",
                self.len,
                self.frames.len(),
                self.history.len(),
                config.input_len(),
                config.history_len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Huber,
    Squared,
}

impl LossKind {
    /// Loss and its derivative for residual `x = prediction - target`.
    fn eval<S: Scalar>(self, x: S) -> (S, S) {
        let half = S::lit(0.5);
        match self {
            LossKind::Squared => (half * x * x, x),
            LossKind::Huber => {
                if x.abs() <= S::one() {
                    (half * x * x, x)
                } else {
                    (x.abs() - half, x.signum())
                }
            }
        }
    }
}

pub struct QLossOutput<S> {
    pub loss: f64,
    /// Online Q of the taken action for every sample.
    pub q_taken: Vec<S>,
    pub grads: QNetwork<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork<S> {
    config: QNetConfig,
    pub conv: ConvStack<S>,
    pub value: Head<S>,
    pub advantage: Head<S>,
}

struct QCache<S> {
    conv: Vec<StackCache<S>>,
    features: Vec<S>,
    adv_input: Vec<S>,
    value: HeadCache<S>,
    advantage: HeadCache<S>,
}

impl<S: Scalar> QNetwork<S> {
    pub fn new<R: Rng + ?Sized>(config: QNetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let conv = ConvStack::new(config.frames(), config.obs_height, config.obs_width, &config.conv, rng)?;
        let f = conv.feature_len();
        let value = Head::new(f, config.hidden, 1, rng);
        let advantage = Head::new(f + config.history_len(), config.hidden, config.variant.num_q_actions(), rng);
        Ok(Self {
            config,
            conv,
            value,
            advantage,
        })
    }

    pub fn config(&self) -> &QNetConfig {
        &self.config
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            conv: self.conv.zeros_like(),
            value: self.value.zeros_like(),
            advantage: self.advantage.zeros_like(),
        }
    }

    pub fn num_actions(&self) -> usize {
        self.config.variant.num_q_actions()
    }

    pub fn feature_len(&self) -> usize {
        self.conv.feature_len()
    }

    /// Feature vector of one `[n+1, h, w]` frame stack.
    pub fn forward_features(&self, frames: &Tensor<S>) -> Result<Tensor<S>> {
        let expect = [self.config.frames(), self.config.obs_height, self.config.obs_width];
        if frames.shape() != expect {
            return Err(Error::input(format!(
                "frame stack shape {:?}, expected {expect:?}",
                frames.shape()
            )));
        }
        let (features, _) = self.conv.forward_batch(frames.data(), 1)?;
        Tensor::new(vec![features.len()], features)
    }

    fn validate_history(&self, past_actions: &[[S; Action::COUNT]]) -> Result<Vec<S>> {
        if past_actions.len() != self.config.action_memory {
            return Err(Error::input(format!(
                "expected {} past actions, got {}",
                self.config.action_memory,
                past_actions.len()
            )));
        }
        let mut out = Vec::with_capacity(self.config.history_len());
        for (i, slot) in past_actions.iter().enumerate() {
            let binary = slot.iter().all(|&x| x == S::zero() || x == S::one());
            let sum: S = slot.iter().copied().sum();
            // An all-zero slot marks padding before the first action.
            if !binary || (sum != S::one() && sum != S::zero()) {
                return Err(Error::input(format!("past action {i} is not a one-hot vector")));
            }
            out.extend_from_slice(slot);
        }
        Ok(out)
    }

    /// Q for every action from features and the past-action one-hots.
    pub fn forward_dueling(&self, features: &Tensor<S>, past_actions: &[[S; Action::COUNT]]) -> Result<Vec<S>> {
        let (value, advantages) = self.value_and_advantages(features, past_actions)?;
        Ok(dueling_combine(&advantages, value))
    }

    pub fn value_and_advantages(&self, features: &Tensor<S>, past_actions: &[[S; Action::COUNT]]) -> Result<(S, Vec<S>)> {
        if features.data().len() != self.feature_len() {
            return Err(Error::input(format!(
                "feature vector has {} values, expected {}",
                features.data().len(),
                self.feature_len()
            )));
        }
        let history = self.validate_history(past_actions)?;
        let value = self.value.forward(features.data(), 1, "value")?.out[0];
        let mut input = features.data().to_vec();
        input.extend_from_slice(&history);
        let advantages = self.advantage.forward(&input, 1, "advantage")?.out;
        Ok((value, advantages))
    }

    fn forward_cached(&self, batch: &QBatch<S>) -> Result<QCache<S>> {
        batch.check(&self.config)?;
        let b = batch.len;
        let (features, conv) = self.conv.forward_batch(&batch.frames, b)?;
        let f = self.feature_len();
        let hl = self.config.history_len();
        let mut adv_input = Vec::with_capacity(b * (f + hl));
        for i in 0..b {
            adv_input.extend_from_slice(&features[i * f..(i + 1) * f]);
            adv_input.extend_from_slice(&batch.history[i * hl..(i + 1) * hl]);
        }
        let value = self.value.forward(&features, b, "value")?;
        let advantage = self.advantage.forward(&adv_input, b, "advantage")?;
        Ok(QCache {
            conv,
            features,
            adv_input,
            value,
            advantage,
        })
    }

    /// Q values `[batch, actions]`.
    pub fn q_batch(&self, batch: &QBatch<S>) -> Result<Vec<S>> {
        let cache = self.forward_cached(batch)?;
        let k = self.num_actions();
        Ok((0..batch.len)
            .flat_map(|i| dueling_combine(&cache.advantage.out[i * k..(i + 1) * k], cache.value.out[i]))
            .collect())
    }

    /// State values `V(s)` for a batch.
    pub fn value_batch(&self, batch: &QBatch<S>) -> Result<Vec<S>> {
        batch.check(&self.config)?;
        let (features, _) = self.conv.forward_batch(&batch.frames, batch.len)?;
        Ok(self.value.forward(&features, batch.len, "value")?.out)
    }

    /// Importance-weighted loss on the taken actions' Q, averaged over the
    /// batch, with gradients w.r.t. every parameter.
    pub fn loss_gradients(
        &self,
        batch: &QBatch<S>,
        actions: &[usize],
        targets: &[S],
        weights: &[S],
        loss: LossKind,
    ) -> Result<QLossOutput<S>> {
        let b = batch.len;
        let k = self.num_actions();
        if b == 0 || actions.len() != b || targets.len() != b || weights.len() != b {
            return Err(Error::input("loss batch must be non-empty with one action, target and weight per sample"));
        }
        if let Some(&a) = actions.iter().find(|&&a| a >= k) {
            return Err(Error::input(format!("action index {a} outside the {k}-action head")));
        }
        if targets.iter().chain(weights).any(|v| !v.is_finite()) {
            return Err(Error::input("loss targets and weights must be finite"));
        }
        let cache = self.forward_cached(batch)?;
        let scale = S::one() / S::lit(b as f64);
        let mut total = 0.0;
        let mut q_taken = Vec::with_capacity(b);
        let mut d_adv = vec![S::zero(); b * k];
        let mut d_value = vec![S::zero(); b];
        for i in 0..b {
            let q = dueling_combine(&cache.advantage.out[i * k..(i + 1) * k], cache.value.out[i]);
            let qa = q[actions[i]];
            let (l, dl) = loss.eval(qa - targets[i]);
            total += (weights[i] * l * scale).to_f64();
            q_taken.push(qa);
            let g = weights[i] * dl * scale;
            // dQ_a/dA_j = [j == a] - 1/k and dQ_a/dV = 1.
            let share = g / S::lit(k as f64);
            for j in 0..k {
                d_adv[i * k + j] = if j == actions[i] { g - share } else { -share };
            }
            d_value[i] = g;
        }
        if !total.is_finite() {
            return Err(Error::training("loss", "non-finite loss"));
        }
        let mut grads = self.zeros_like();
        let d_features_v = self.value.backward(&cache.features, &cache.value, &mut d_value, b, &mut grads.value);
        let d_adv_input = self.advantage.backward(&cache.adv_input, &cache.advantage, &mut d_adv, b, &mut grads.advantage);
        let f = self.feature_len();
        let width = f + self.config.history_len();
        let mut d_features = d_features_v;
        for i in 0..b {
            for j in 0..f {
                d_features[i * f + j] = d_features[i * f + j] + d_adv_input[i * width + j];
            }
        }
        self.conv.backward_batch(&cache.conv, &d_features, &mut grads.conv);
        for (block, name) in grads.blocks().iter().zip(grads.block_names()) {
            check_finite(block, &name)?;
        }
        Ok(QLossOutput {
            loss: total,
            q_taken,
            grads,
        })
    }

    pub fn block_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.conv.layers.len() {
            names.push(format!("conv{}.weight", i + 1));
            names.push(format!("conv{}.bias", i + 1));
        }
        for head in ["value", "advantage"] {
            for layer in ["hidden", "out"] {
                names.push(format!("{head}.{layer}.weight"));
                names.push(format!("{head}.{layer}.bias"));
            }
        }
        names
    }

}

impl<S: Scalar> Parameters<S> for QNetwork<S> {
    fn blocks(&self) -> Vec<&[S]> {
        let mut out = self.conv.blocks();
        out.extend(self.value.blocks());
        out.extend(self.advantage.blocks());
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [S]> {
        let QNetwork {
            conv, value, advantage, ..
        } = self;
        let mut out = conv.blocks_mut();
        out.extend(value.blocks_mut());
        out.extend(advantage.blocks_mut());
        out
    }

    fn block_shapes(&self) -> Vec<Vec<usize>> {
        let mut out = self.conv.block_shapes();
        out.extend(self.value.block_shapes());
        out.extend(self.advantage.block_shapes());
        out
    }
}
