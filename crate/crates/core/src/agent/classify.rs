//! Supervised single-frame classifiers: the stop classifier used by the MS
//! variant and the frame-to-action baseline.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FramePool;
use crate::env::{Action, EnvState, GridEnvironment};
use crate::error::{Error, Result};
use crate::nn::{default_conv, Classifier, ClassifierConfig, ClassifierKind, ConvSpec, Optimizer, OptimizerConfig, Tensor};
use crate::replay::FrameRef;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub max_rotation_deg: f64,
    /// Smallest crop side as a fraction of the frame side.
    pub min_crop: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            max_rotation_deg: 15.0,
            min_crop: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    /// Frames per epoch; 0 uses every majority-class frame once.
    pub samples_per_epoch: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub augment: AugmentConfig,
    pub conv: Vec<ConvSpec>,
    pub hidden: usize,
    /// Goal probability at or above which the stop classifier fires.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            samples_per_epoch: 8_000,
            batch_size: 32,
            optimizer: OptimizerConfig::default(),
            augment: AugmentConfig::default(),
            conv: default_conv(),
            hidden: 64,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl ClassifierTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("classifier epochs and batch size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config("stop threshold must lie in [0, 1]"));
        }
        let a = &self.augment;
        if !(a.max_rotation_deg.is_finite() && a.max_rotation_deg >= 0.0) || !(a.min_crop > 0.0 && a.min_crop <= 1.0) {
            return Err(Error::config("augmentation ranges are invalid"));
        }
        self.optimizer.validate()
    }

    pub fn network(&self, kind: ClassifierKind, obs_height: usize, obs_width: usize) -> ClassifierConfig {
        ClassifierConfig {
            conv: self.conv.clone(),
            hidden: self.hidden,
            ..ClassifierConfig::new(kind, obs_height, obs_width)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    /// Fraction of positive-class frames in each epoch (stop classifier).
    pub goal_fraction: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    pub heldout_accuracy: Option<f64>,
    /// Mean of per-class recalls on the held-out frames.
    pub heldout_balanced_accuracy: Option<f64>,
}

/// Random rotation about the centre combined with a random crop rescaled to
/// the full frame, sampled bilinearly with edge clamping.
pub fn augment_frame<R: Rng + ?Sized>(frame: &[f32], height: usize, width: usize, config: &AugmentConfig, rng: &mut R) -> Vec<f32> {
    let max = config.max_rotation_deg.to_radians();
    let angle = if max > 0.0 { rng.gen_range(-max..=max) } else { 0.0 };
    let scale = if config.min_crop < 1.0 {
        rng.gen_range(config.min_crop..=1.0)
    } else {
        1.0
    };
    let slack = (1.0 - scale) / 2.0;
    let (cx, cy) = if slack > 0.0 {
        (rng.gen_range(-slack..=slack), rng.gen_range(-slack..=slack))
    } else {
        (0.0, 0.0)
    };
    let (sin, cos) = angle.sin_cos();
    let at = |x: isize, y: isize| -> f64 {
        let x = x.clamp(0, width as isize - 1) as usize;
        let y = y.clamp(0, height as isize - 1) as usize;
        frame[y * width + x] as f64
    };
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let v = (y as f64 + 0.5) / height as f64 - 0.5;
        for x in 0..width {
            let u = (x as f64 + 0.5) / width as f64 - 0.5;
            let su = scale * (cos * u - sin * v) + cx;
            let sv = scale * (sin * u + cos * v) + cy;
            let px = (su + 0.5) * width as f64 - 0.5;
            let py = (sv + 0.5) * height as f64 - 0.5;
            let (x0, y0) = (px.floor(), py.floor());
            let (fx, fy) = (px - x0, py - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
            let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
            out.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    out
}

/// Target action for the supervised baseline: stop on a goal bin, otherwise
/// a move that lowers the goal distance, preferring vertical moves and then
/// the lowest action index.
pub fn baseline_label(env: &GridEnvironment, state: EnvState) -> Result<Action> {
    if env.is_goal(state) {
        return Ok(Action::Stop);
    }
    let here = env.goal_distance(state)?;
    for action in [Action::Up, Action::Down, Action::Left, Action::Right] {
        if env.goal_distance(env.translate(state, action))? < here {
            return Ok(action);
        }
    }
    Err(Error::input(format!("no move lowers the goal distance from {state}")))
}

fn all_frames(envs: &[GridEnvironment]) -> Vec<(FrameRef, EnvState)> {
    let mut out = Vec::new();
    for (e, env) in envs.iter().enumerate() {
        let spec = env.spec();
        for bin in 0..spec.num_bins() {
            for frame in 0..spec.frames_per_bin {
                out.push((
                    FrameRef {
                        env: e as u32,
                        bin: bin as u32,
                        frame: frame as u32,
                    },
                    spec.state_at(bin),
                ));
            }
        }
    }
    out
}

fn shared_spec(envs: &[GridEnvironment]) -> Result<crate::env::GridSpec> {
    let first = envs.first().ok_or_else(|| Error::input("classifier training needs environments"))?;
    if envs.iter().any(|e| e.spec() != first.spec()) {
        return Err(Error::input("environments must share one grid spec"));
    }
    Ok(*first.spec())
}

/// Runs minibatch training over `epoch(e, rng)`, the list of labelled frames
/// for epoch `e`. Returns per-epoch training accuracy.
fn fit(
    net: &mut Classifier<f32>,
    envs: &[GridEnvironment],
    config: &ClassifierTrainConfig,
    rng: &mut ChaCha8Rng,
    mut epoch: impl FnMut(usize, &mut ChaCha8Rng) -> Vec<(FrameRef, usize)>,
) -> Result<Vec<f64>> {
    let (h, w) = (net.config().obs_height, net.config().obs_width);
    let mut optimizer = Optimizer::new(config.optimizer)?;
    let mut accuracy = Vec::with_capacity(config.epochs);
    for e in 0..config.epochs {
        let samples = epoch(e, rng);
        let mut correct = 0;
        for chunk in samples.chunks(config.batch_size) {
            let mut frames = Vec::with_capacity(chunk.len() * h * w);
            let mut labels = Vec::with_capacity(chunk.len());
            for &(frame, label) in chunk {
                let pixels = envs.pixels(frame);
                if config.augment.enabled {
                    frames.extend(augment_frame(pixels, h, w, &config.augment, rng));
                } else {
                    frames.extend_from_slice(pixels);
                }
                labels.push(label);
            }
            let out = net.loss_gradients(&frames, &labels)?;
            correct += out.correct;
            optimizer.step(net, &out.grads)?;
        }
        accuracy.push(correct as f64 / samples.len() as f64);
    }
    Ok(accuracy)
}

pub(crate) fn stop_fires(net: &Classifier<f32>, frame: &[f32], threshold: f64) -> Result<bool> {
    let c = net.config();
    let tensor = Tensor::new(vec![c.obs_height, c.obs_width], frame.to_vec())?;
    Ok(net.forward_stop(&tensor)? as f64 >= threshold)
}

/// (accuracy, balanced accuracy) of `predict` over every frame of `envs`.
fn score(
    envs: &[GridEnvironment],
    classes: usize,
    label: impl Fn(&GridEnvironment, EnvState) -> Result<usize>,
    predict: impl Fn(&[f32]) -> Result<usize>,
) -> Result<(f64, f64)> {
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for (frame, state) in all_frames(envs) {
        let y = label(&envs[frame.env as usize], state)?;
        totals[y] += 1;
        if predict(envs.pixels(frame))? == y {
            hits[y] += 1;
        }
    }
    let n: usize = totals.iter().sum();
    let accuracy = hits.iter().sum::<usize>() as f64 / n as f64;
    let present: Vec<f64> = hits
        .iter()
        .zip(&totals)
        .filter(|(_, &t)| t > 0)
        .map(|(&h, &t)| h as f64 / t as f64)
        .collect();
    Ok((accuracy, present.iter().sum::<f64>() / present.len() as f64))
}

/// Trains the goal/non-goal classifier. Each epoch holds equal numbers of
/// goal and non-goal frames, oversampling goal frames with replacement.
pub fn train_stop_classifier(
    train_envs: &[GridEnvironment],
    heldout: &[GridEnvironment],
    config: &ClassifierTrainConfig,
) -> Result<(Classifier<f32>, ClassifierReport)> {
    config.validate()?;
    let spec = shared_spec(train_envs)?;
    let mut goal = Vec::new();
    let mut other = Vec::new();
    for (frame, state) in all_frames(train_envs) {
        if train_envs[frame.env as usize].is_goal(state) {
            goal.push(frame);
        } else {
            other.push(frame);
        }
    }
    if goal.is_empty() || other.is_empty() {
        return Err(Error::input("stop classifier needs both goal and non-goal frames"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = Classifier::new(config.network(ClassifierKind::Stop, spec.obs_height, spec.obs_width), &mut rng)?;
    let half = match config.samples_per_epoch {
        0 => other.len(),
        n => n.div_ceil(2),
    };
    let mut goal_fraction = Vec::with_capacity(config.epochs);
    let train_accuracy = fit(&mut net, train_envs, config, &mut rng, |_, rng| {
        let mut samples = Vec::with_capacity(2 * half);
        other.shuffle(rng);
        samples.extend((0..half).map(|i| (other[i % other.len()], 0)));
        for i in 0..half {
            if i % goal.len() == 0 {
                goal.shuffle(rng);
            }
            samples.push((goal[i % goal.len()], 1));
        }
        samples.shuffle(rng);
        goal_fraction.push(samples.iter().filter(|s| s.1 == 1).count() as f64 / samples.len() as f64);
        samples
    })?;
    let (heldout_accuracy, heldout_balanced_accuracy) = if heldout.is_empty() {
        (None, None)
    } else {
        let (a, b) = score(
            heldout,
            2,
            |env, s| Ok(env.is_goal(s) as usize),
            |f| stop_fires(&net, f, config.threshold).map(|x| x as usize),
        )?;
        (Some(a), Some(b))
    };
    let report = ClassifierReport {
        goal_fraction,
        train_accuracy,
        heldout_accuracy,
        heldout_balanced_accuracy,
    };
    Ok((net, report))
}

/// Trains the frame-to-action classifier on [`baseline_label`] targets.
pub fn train_action_classifier_baseline(
    train_envs: &[GridEnvironment],
    heldout: &[GridEnvironment],
    config: &ClassifierTrainConfig,
) -> Result<(Classifier<f32>, ClassifierReport)> {
    config.validate()?;
    let spec = shared_spec(train_envs)?;
    let mut data = Vec::new();
    for (frame, state) in all_frames(train_envs) {
        let label = baseline_label(&train_envs[frame.env as usize], state)?;
        data.push((frame, label.index()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = Classifier::new(config.network(ClassifierKind::Action, spec.obs_height, spec.obs_width), &mut rng)?;
    let per_epoch = match config.samples_per_epoch {
        0 => data.len(),
        n => n,
    };
    let train_accuracy = fit(&mut net, train_envs, config, &mut rng, |_, rng| {
        let mut samples = Vec::with_capacity(per_epoch);
        while samples.len() < per_epoch {
            data.shuffle(rng);
            let take = (per_epoch - samples.len()).min(data.len());
            samples.extend_from_slice(&data[..take]);
        }
        samples
    })?;
    let (heldout_accuracy, heldout_balanced_accuracy) = if heldout.is_empty() {
        (None, None)
    } else {
        let (h, w) = (spec.obs_height, spec.obs_width);
        let (a, b) = score(
            heldout,
            Action::COUNT,
            |env, s| baseline_label(env, s).map(Action::index),
            |f| net.predict(&Tensor::new(vec![h, w], f.to_vec())?),
        )?;
        (Some(a), Some(b))
    };
    let report = ClassifierReport {
        goal_fraction: Vec::new(),
        train_accuracy,
        heldout_accuracy,
        heldout_balanced_accuracy,
    };
    Ok((net, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::tests::line_env;

    #[test]
    fn augmentation_identity_when_disabled_ranges() {
        let frame: Vec<f32> = (0..64).map(|i| i as f32 / 64.0).collect();
        let config = AugmentConfig {
            enabled: true,
            max_rotation_deg: 0.0,
            min_crop: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment_frame(&frame, 8, 8, &config, &mut rng);
        for (a, b) in out.iter().zip(&frame) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn augmentation_keeps_range_and_size() {
        let frame: Vec<f32> = (0..100).map(|i| ((i * 37) % 100) as f32 / 100.0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let out = augment_frame(&frame, 10, 10, &AugmentConfig::default(), &mut rng);
            assert_eq!(out.len(), 100);
            assert!(out.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn baseline_labels_follow_distance_rule() {
        // Goal in the bottom-right corner of a 3x3 grid.
        let env = line_env(3, 3, &[(2, 2)]);
        assert_eq!(baseline_label(&env, EnvState::new(2, 2)).unwrap(), Action::Stop);
        assert_eq!(baseline_label(&env, EnvState::new(1, 2)).unwrap(), Action::Down);
        // Both down and right help; vertical wins.
        assert_eq!(baseline_label(&env, EnvState::new(0, 0)).unwrap(), Action::Down);
        assert_eq!(baseline_label(&env, EnvState::new(2, 0)).unwrap(), Action::Right);
        let above = line_env(3, 3, &[(0, 1)]);
        assert_eq!(baseline_label(&above, EnvState::new(2, 1)).unwrap(), Action::Up);
    }

    #[test]
    fn single_class_data_rejected() {
        let env = line_env(1, 2, &[(0, 0), (0, 1)]);
        let err = train_stop_classifier(&[env], &[], &ClassifierTrainConfig::default());
        assert!(matches!(err, Err(Error::Input(_))));
    }
}
