//! Convolution and dense layers with hand-written backward passes.
//! Convolutions are valid (unpadded) and lowered to GEMM via im2col.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{Error, Result};

fn uniform_init<S: Scalar, R: Rng + ?Sized>(rng: &mut R, len: usize, fan_in: usize, gain: f64) -> Vec<S> {
    let bound = gain * (6.0 / fan_in as f64).sqrt();
    (0..len).map(|_| S::lit(rng.gen_range(-bound..bound))).collect()
}

pub(crate) fn check_finite<S: Scalar>(values: &[S], layer: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::training(layer, "non-finite activation"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<S> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `[out_channels, in_channels * kernel * kernel]`
    pub weight: Vec<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, spec: ConvSpec, rng: &mut R) -> Self {
        let fan_in = in_channels * spec.kernel * spec.kernel;
        Self {
            in_channels,
            out_channels: spec.channels,
            kernel: spec.kernel,
            stride: spec.stride,
            weight: uniform_init(rng, spec.channels * fan_in, fan_in, 1.0),
            bias: vec![S::zero(); spec.channels],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            weight: vec![S::zero(); self.weight.len()],
            bias: vec![S::zero(); self.bias.len()],
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        if h < self.kernel || w < self.kernel || self.stride == 0 {
            return None;
        }
        Some(((h - self.kernel) / self.stride + 1, (w - self.kernel) / self.stride + 1))
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Unfolds `input` (`[C, h, w]`) into `[C*k*k, ho*wo]`.
    fn im2col(&self, input: &[S], h: usize, w: usize, ho: usize, wo: usize, col: &mut [S]) {
        let k = self.kernel;
        let n = ho * wo;
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut col[row * n..(row + 1) * n];
                    for oy in 0..ho {
                        let src = &input[(c * h + oy * self.stride + ky) * w..][..w];
                        for ox in 0..wo {
                            dst[oy * wo + ox] = src[ox * self.stride + kx];
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, col: &[S], h: usize, w: usize, ho: usize, wo: usize, d_input: &mut [S]) {
        let k = self.kernel;
        let n = ho * wo;
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &col[row * n..(row + 1) * n];
                    for oy in 0..ho {
                        let dst = &mut d_input[(c * h + oy * self.stride + ky) * w..][..w];
                        for ox in 0..wo {
                            dst[ox * self.stride + kx] = dst[ox * self.stride + kx] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }

    /// ReLU(conv(input)) for one sample. Returns the im2col buffer for backward.
    pub fn forward(&self, input: &[S], h: usize, w: usize, out: &mut [S]) -> Vec<S> {
        let (ho, wo) = self.output_size(h, w).expect("validated geometry");
        let n = ho * wo;
        let mut col = vec![S::zero(); self.patch_len() * n];
        self.im2col(input, h, w, ho, wo, &mut col);
        for (oc, chunk) in out[..self.out_channels * n].chunks_exact_mut(n).enumerate() {
            chunk.fill(self.bias[oc]);
        }
        S::gemm(self.out_channels, self.patch_len(), n, &self.weight, false, &col, false, S::one(), out);
        for v in out[..self.out_channels * n].iter_mut() {
            if *v < S::zero() {
                *v = S::zero();
            }
        }
        col
    }

    /// Accumulates parameter gradients for one sample. `d_out` is the gradient
    /// w.r.t. this layer's ReLU output and is masked in place. When `d_input`
    /// is given, the gradient w.r.t. the layer input is added to it.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        col: &[S],
        out: &[S],
        d_out: &mut [S],
        h: usize,
        w: usize,
        grads: &mut Conv2d<S>,
        d_input: Option<&mut [S]>,
    ) {
        let (ho, wo) = self.output_size(h, w).expect("validated geometry");
        let n = ho * wo;
        for (g, &o) in d_out.iter_mut().zip(out) {
            if o <= S::zero() {
                *g = S::zero();
            }
        }
        for (oc, chunk) in d_out.chunks_exact(n).enumerate() {
            grads.bias[oc] = grads.bias[oc] + chunk.iter().copied().sum();
        }
        S::gemm(self.out_channels, n, self.patch_len(), d_out, false, col, true, S::one(), &mut grads.weight);
        if let Some(d_input) = d_input {
            let mut d_col = vec![S::zero(); self.patch_len() * n];
            S::gemm(self.patch_len(), self.out_channels, n, &self.weight, true, d_out, false, S::zero(), &mut d_col);
            self.col2im_add(&d_col, h, w, ho, wo, d_input);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<S> {
    pub inputs: usize,
    pub outputs: usize,
    /// `[outputs, inputs]`
    pub weight: Vec<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> Dense<S> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, gain: f64, rng: &mut R) -> Self {
        Self {
            inputs,
            outputs,
            weight: uniform_init(rng, inputs * outputs, inputs, gain),
            bias: vec![S::zero(); outputs],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            inputs: self.inputs,
            outputs: self.outputs,
            weight: vec![S::zero(); self.weight.len()],
            bias: vec![S::zero(); self.bias.len()],
        }
    }

    /// `[batch, inputs] -> [batch, outputs]`, optionally followed by ReLU.
    pub fn forward(&self, x: &[S], batch: usize, relu: bool) -> Vec<S> {
        let mut y = Vec::with_capacity(batch * self.outputs);
        for _ in 0..batch {
            y.extend_from_slice(&self.bias);
        }
        S::gemm(batch, self.inputs, self.outputs, x, false, &self.weight, true, S::one(), &mut y);
        if relu {
            for v in y.iter_mut() {
                if *v < S::zero() {
                    *v = S::zero();
                }
            }
        }
        y
    }

    /// Backward through the layer for a batch. If the layer had a ReLU, pass
    /// its output as `relu_out` so `d_y` gets masked. Returns `dL/dx`.
    pub fn backward(
        &self,
        x: &[S],
        relu_out: Option<&[S]>,
        d_y: &mut [S],
        batch: usize,
        grads: &mut Dense<S>,
        need_input_grad: bool,
    ) -> Option<Vec<S>> {
        if let Some(out) = relu_out {
            for (g, &o) in d_y.iter_mut().zip(out) {
                if o <= S::zero() {
                    *g = S::zero();
                }
            }
        }
        for row in d_y.chunks_exact(self.outputs) {
            for (b, &g) in grads.bias.iter_mut().zip(row) {
                *b = *b + g;
            }
        }
        S::gemm(self.outputs, batch, self.inputs, d_y, true, x, false, S::one(), &mut grads.weight);
        need_input_grad.then(|| {
            let mut d_x = vec![S::zero(); batch * self.inputs];
            S::gemm(batch, self.outputs, self.inputs, d_y, false, &self.weight, false, S::zero(), &mut d_x);
            d_x
        })
    }
}

/// Stack of ReLU convolutions turning `[channels, height, width]` inputs into
/// a flat feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack<S> {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub layers: Vec<Conv2d<S>>,
}

/// Per-sample activations kept for the backward pass.
pub(crate) struct StackCache<S> {
    cols: Vec<Vec<S>>,
    /// Output of every layer; the last one is the feature vector.
    outs: Vec<Vec<S>>,
}

impl<S: Scalar> ConvStack<S> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        height: usize,
        width: usize,
        specs: &[ConvSpec],
        rng: &mut R,
    ) -> Result<Self> {
        validate_geometry(in_channels, height, width, specs)?;
        let mut layers = Vec::with_capacity(specs.len());
        let mut c = in_channels;
        for spec in specs {
            layers.push(Conv2d::new(c, *spec, rng));
            c = spec.channels;
        }
        Ok(Self {
            in_channels,
            height,
            width,
            layers,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            in_channels: self.in_channels,
            height: self.height,
            width: self.width,
            layers: self.layers.iter().map(Conv2d::zeros_like).collect(),
        }
    }

    pub fn specs(&self) -> Vec<ConvSpec> {
        self.layers
            .iter()
            .map(|l| ConvSpec {
                channels: l.out_channels,
                kernel: l.kernel,
                stride: l.stride,
            })
            .collect()
    }

    /// (channels, height, width) after every layer.
    fn shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::with_capacity(self.layers.len() + 1);
        let (mut h, mut w) = (self.height, self.width);
        out.push((self.in_channels, h, w));
        for l in &self.layers {
            let (ho, wo) = l.output_size(h, w).expect("validated geometry");
            out.push((l.out_channels, ho, wo));
            h = ho;
            w = wo;
        }
        out
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn feature_len(&self) -> usize {
        let (c, h, w) = *self.shapes().last().expect("at least the input shape");
        c * h * w
    }

    pub(crate) fn forward_sample(&self, input: &[S]) -> Result<StackCache<S>> {
        let shapes = self.shapes();
        let mut cols = Vec::with_capacity(self.layers.len());
        let mut outs: Vec<Vec<S>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (_, h, w) = shapes[i];
            let (c, ho, wo) = shapes[i + 1];
            let mut out = vec![S::zero(); c * ho * wo];
            let src = if i == 0 { input } else { &outs[i - 1] };
            let col = layer.forward(src, h, w, &mut out);
            check_finite(&out, &format!("conv{}", i + 1))?;
            cols.push(col);
            outs.push(out);
        }
        if self.layers.is_empty() {
            outs.push(input.to_vec());
        }
        Ok(StackCache { cols, outs })
    }

    /// Features for a batch of inputs laid out `[batch, C, H, W]`.
    pub(crate) fn forward_batch(&self, inputs: &[S], batch: usize) -> Result<(Vec<S>, Vec<StackCache<S>>)> {
        let len = self.input_len();
        let f = self.feature_len();
        let mut features = Vec::with_capacity(batch * f);
        let mut caches = Vec::with_capacity(batch);
        for b in 0..batch {
            let cache = self.forward_sample(&inputs[b * len..(b + 1) * len])?;
            features.extend_from_slice(cache.outs.last().expect("non-empty"));
            caches.push(cache);
        }
        Ok((features, caches))
    }

    pub(crate) fn backward_batch(&self, caches: &[StackCache<S>], d_features: &[S], grads: &mut ConvStack<S>) {
        if self.layers.is_empty() {
            return;
        }
        let shapes = self.shapes();
        let f = self.feature_len();
        for (b, cache) in caches.iter().enumerate() {
            let mut d_out = d_features[b * f..(b + 1) * f].to_vec();
            for i in (0..self.layers.len()).rev() {
                let (c_in, h, w) = shapes[i];
                let layer = &self.layers[i];
                let out = &cache.outs[i];
                if i == 0 {
                    layer.backward(&cache.cols[0], out, &mut d_out, h, w, &mut grads.layers[0], None);
                } else {
                    let mut d_in = vec![S::zero(); c_in * h * w];
                    layer.backward(&cache.cols[i], out, &mut d_out, h, w, &mut grads.layers[i], Some(&mut d_in));
                    d_out = d_in;
                }
            }
        }
    }

    pub fn blocks(&self) -> Vec<&[S]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [S]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn block_shapes(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    vec![l.out_channels, l.in_channels, l.kernel, l.kernel],
                    vec![l.out_channels],
                ]
            })
            .collect()
    }
}

pub fn validate_geometry(in_channels: usize, height: usize, width: usize, specs: &[ConvSpec]) -> Result<()> {
    if in_channels == 0 || height == 0 || width == 0 {
        return Err(Error::config("network input must have positive channels and size"));
    }
    let (mut h, mut w) = (height, width);
    for (i, s) in specs.iter().enumerate() {
        if s.channels == 0 || s.kernel == 0 || s.stride == 0 {
            return Err(Error::config(format!("conv layer {} has a zero dimension", i + 1)));
        }
        if h < s.kernel || w < s.kernel {
            return Err(Error::config(format!(
                "conv layer {} kernel {} does not fit its {h}x{w} input",
                i + 1,
                s.kernel
            )));
        }
        h = (h - s.kernel) / s.stride + 1;
        w = (w - s.kernel) / s.stride + 1;
    }
    Ok(())
}

impl<S: Scalar> Dense<S> {
    pub fn blocks(&self) -> [&[S]; 2] {
        [&self.weight, &self.bias]
    }

    pub fn blocks_mut(&mut self) -> [&mut [S]; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn block_shapes(&self) -> [Vec<usize>; 2] {
        [vec![self.outputs, self.inputs], vec![self.outputs]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution.
    fn naive_conv(layer: &Conv2d<f64>, input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (ho, wo) = layer.output_size(h, w).unwrap();
        let k = layer.kernel;
        let mut out = vec![0.0; layer.out_channels * ho * wo];
        for oc in 0..layer.out_channels {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = layer.bias[oc];
                    for c in 0..layer.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let wi = ((oc * layer.in_channels + c) * k + ky) * k + kx;
                                let xi = (c * h + oy * layer.stride + ky) * w + ox * layer.stride + kx;
                                acc += layer.weight[wi] * input[xi];
                            }
                        }
                    }
                    out[(oc * ho + oy) * wo + ox] = acc.max(0.0);
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ConvSpec { channels: 3, kernel: 3, stride: 2 };
        let layer = Conv2d::<f64>::new(2, spec, &mut rng);
        let (h, w) = (9, 7);
        let input: Vec<f64> = (0..2 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (ho, wo) = layer.output_size(h, w).unwrap();
        let mut out = vec![0.0; 3 * ho * wo];
        layer.forward(&input, h, w, &mut out);
        let expect = naive_conv(&layer, &input, h, w);
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let specs = [ConvSpec { channels: 4, kernel: 3, stride: 1 }, ConvSpec { channels: 2, kernel: 2, stride: 2 }];
        let stack = ConvStack::<f32>::new(2, 8, 8, &specs, &mut rng).unwrap();
        let zeros = vec![0.0; stack.input_len()];
        let (features, _) = stack.forward_batch(&zeros, 1).unwrap();
        assert!(features.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn oversized_kernel_rejected() {
        let specs = [ConvSpec { channels: 4, kernel: 9, stride: 1 }];
        assert!(validate_geometry(1, 8, 8, &specs).is_err());
    }
}
