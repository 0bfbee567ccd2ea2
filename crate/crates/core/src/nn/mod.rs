//! A small convolutional network with dueling Q heads, a single-frame
//! classifier, optimizers and a checkpoint format. Everything is generic over
//! the float type so gradients can be checked in `f64`.

mod checkpoint;
mod classifier;
mod layers;
mod optim;
mod qnet;
mod scalar;
mod tensor;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use classifier::{Classifier, ClassifierConfig, ClassifierKind, ClassifierLossOutput};
pub use layers::{Conv2d, ConvSpec, ConvStack, Dense};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use qnet::{default_conv, dueling_combine, Head, LossKind, QBatch, QLossOutput, QNetConfig, QNetwork, Variant};
pub use scalar::Scalar;
pub use tensor::Tensor;

use crate::error::Result;

/// Access to a model's trainable parameters as flat blocks in a fixed order.
pub trait Parameters<S: Copy> {
    fn blocks(&self) -> Vec<&[S]>;
    fn blocks_mut(&mut self) -> Vec<&mut [S]>;
    fn block_shapes(&self) -> Vec<Vec<usize>>;

    fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    fn copy_from(&mut self, other: &Self) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            dst.copy_from_slice(src);
        }
    }
}

/// Largest relative error over all parameters between the analytic gradient
/// returned by `loss_and_grad` and a central finite difference with step `h`.
/// The relative error is `|a - n| / max(|a| + |n|, 1e-8)`.
pub fn gradient_check<P, F>(params: &P, h: f64, loss_and_grad: F) -> Result<f64>
where
    P: Parameters<f64> + Clone,
    F: Fn(&P) -> Result<(f64, P)>,
{
    let (_, analytic) = loss_and_grad(params)?;
    let analytic: Vec<f64> = analytic.blocks().iter().flat_map(|b| b.iter().copied()).collect();
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    let mut flat = 0;
    for b in 0..params.blocks().len() {
        for i in 0..params.blocks()[b].len() {
            let original = params.blocks()[b][i];
            probe.blocks_mut()[b][i] = original + h;
            let plus = loss_and_grad(&probe)?.0;
            probe.blocks_mut()[b][i] = original - h;
            let minus = loss_and_grad(&probe)?.0;
            probe.blocks_mut()[b][i] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[flat];
            worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8));
            flat += 1;
        }
    }
    Ok(worst)
}
