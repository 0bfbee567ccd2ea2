use super::Scalar;
use crate::error::{Error, Result};

/// Dense row-major array with a fixed shape and finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::input(format!("tensor shape {shape:?} must be non-empty and positive")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::input(format!(
                "tensor shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("tensor contains non-finite values"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![S::zero(); len],
        }
    }

    /// Stacks equally sized images into a `[frames, height, width]` tensor.
    pub fn from_frames(frames: &[&[f32]], height: usize, width: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(frames.len() * height * width);
        for f in frames {
            if f.len() != height * width {
                return Err(Error::input(format!(
                    "frame has {} pixels, expected {height}x{width}",
                    f.len()
                )));
            }
            data.extend(f.iter().map(|&p| S::lit(p as f64)));
        }
        Self::new(vec![frames.len(), height, width], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }
}
