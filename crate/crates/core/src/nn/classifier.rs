use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{validate_geometry, ConvSpec, ConvStack};
use super::qnet::{default_conv, Head};
use super::{Parameters, Scalar, Tensor};
use crate::error::{Error, Result};

/// What a single-frame classifier predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    /// Two classes: non-goal (0) and goal (1).
    Stop,
    /// One class per action.
    Action,
}

impl ClassifierKind {
    pub fn num_classes(self) -> usize {
        match self {
            ClassifierKind::Stop => 2,
            ClassifierKind::Action => crate::env::Action::COUNT,
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            ClassifierKind::Stop => b'C',
            ClassifierKind::Action => b'B',
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        [ClassifierKind::Stop, ClassifierKind::Action]
            .into_iter()
            .find(|k| k.tag() == tag)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub kind: ClassifierKind,
    pub obs_height: usize,
    pub obs_width: usize,
    pub conv: Vec<ConvSpec>,
    pub hidden: usize,
}

impl ClassifierConfig {
    pub fn new(kind: ClassifierKind, obs_height: usize, obs_width: usize) -> Self {
        Self {
            kind,
            obs_height,
            obs_width,
            conv: default_conv(),
            hidden: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::config("hidden width must be positive"));
        }
        validate_geometry(1, self.obs_height, self.obs_width, &self.conv)
    }
}

fn softmax_in_place<S: Scalar>(logits: &mut [S]) {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in logits.iter_mut() {
        *v = *v / sum;
    }
}

pub struct ClassifierLossOutput<S> {
    pub loss: f64,
    pub correct: usize,
    pub grads: Classifier<S>,
}

/// Single-frame convolutional classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<S> {
    config: ClassifierConfig,
    pub conv: ConvStack<S>,
    pub head: Head<S>,
}

impl<S: Scalar> Classifier<S> {
    pub fn new<R: Rng + ?Sized>(config: ClassifierConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let conv = ConvStack::new(1, config.obs_height, config.obs_width, &config.conv, rng)?;
        let head = Head::new(conv.feature_len(), config.hidden, config.kind.num_classes(), rng);
        Ok(Self { config, conv, head })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            conv: self.conv.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    fn frame_len(&self) -> usize {
        self.config.obs_height * self.config.obs_width
    }

    /// Class logits `[batch, classes]` for frames `[batch, h, w]`.
    pub fn logits(&self, frames: &[S], batch: usize) -> Result<Vec<S>> {
        if frames.len() != batch * self.frame_len() {
            return Err(Error::input(format!(
                "expected {batch} frames of {} pixels",
                self.frame_len()
            )));
        }
        let (features, _) = self.conv.forward_batch(frames, batch)?;
        Ok(self.head.forward(&features, batch, "head")?.out)
    }

    pub fn probabilities(&self, frame: &Tensor<S>) -> Result<Vec<S>> {
        let expect = [self.config.obs_height, self.config.obs_width];
        let shape = frame.shape();
        if !(shape == expect || shape == [1, expect[0], expect[1]]) {
            return Err(Error::input(format!("frame shape {shape:?}, expected {expect:?}")));
        }
        let mut p = self.logits(frame.data(), 1)?;
        softmax_in_place(&mut p);
        Ok(p)
    }

    /// Probability of the goal class.
    pub fn forward_stop(&self, frame: &Tensor<S>) -> Result<S> {
        if self.config.kind != ClassifierKind::Stop {
            return Err(Error::input("forward_stop needs a stop classifier"));
        }
        Ok(self.probabilities(frame)?[1])
    }

    pub fn predict(&self, frame: &Tensor<S>) -> Result<usize> {
        let p = self.probabilities(frame)?;
        Ok(argmax(&p))
    }

    /// Mean cross-entropy over the batch with gradients.
    pub fn loss_gradients(&self, frames: &[S], labels: &[usize]) -> Result<ClassifierLossOutput<S>> {
        let b = labels.len();
        let k = self.config.kind.num_classes();
        if b == 0 || frames.len() != b * self.frame_len() {
            return Err(Error::input("classifier batch must be non-empty with one frame per label"));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::input(format!("label {l} outside {k} classes")));
        }
        let (features, conv_cache) = self.conv.forward_batch(frames, b)?;
        let head_cache = self.head.forward(&features, b, "head")?;
        let scale = S::one() / S::lit(b as f64);
        let mut d_logits = head_cache.out.clone();
        let mut total = 0.0;
        let mut correct = 0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &mut d_logits[i * k..(i + 1) * k];
            if argmax(row) == label {
                correct += 1;
            }
            softmax_in_place(row);
            total -= row[label].max(S::lit(1e-30)).ln().to_f64() / b as f64;
            row[label] = row[label] - S::one();
            for v in row.iter_mut() {
                *v = *v * scale;
            }
        }
        if !total.is_finite() {
            return Err(Error::training("loss", "non-finite loss"));
        }
        let mut grads = self.zeros_like();
        let d_features = self.head.backward(&features, &head_cache, &mut d_logits, b, &mut grads.head);
        self.conv.backward_batch(&conv_cache, &d_features, &mut grads.conv);
        Ok(ClassifierLossOutput {
            loss: total,
            correct,
            grads,
        })
    }
}

pub(crate) fn argmax<S: Scalar>(values: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl<S: Scalar> Parameters<S> for Classifier<S> {
    fn blocks(&self) -> Vec<&[S]> {
        let mut out = self.conv.blocks();
        out.extend(self.head.blocks());
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [S]> {
        let Classifier { conv, head, .. } = self;
        let mut out = conv.blocks_mut();
        out.extend(head.blocks_mut());
        out
    }

    fn block_shapes(&self) -> Vec<Vec<usize>> {
        let mut out = self.conv.block_shapes();
        out.extend(self.head.block_shapes());
        out
    }
}
