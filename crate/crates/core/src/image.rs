//! Image and latent tensors.

use crate::error::{shape_mismatch, Error, Result};
use crate::tensor::Tensor;

/// RGB image `[3, H, W]` with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Tensor,
}

impl ImageTensor {
    pub fn new(data: Tensor) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(shape_mismatch("image", &[3, 0, 0], s));
        }
        if !data.is_finite() {
            return Err(Error::InvalidArgument("image contains non-finite values".into()));
        }
        Ok(Self { data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            data: Tensor::full(&[3, height, width], value),
        }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn data(&self) -> &[f64] {
        self.data.data()
    }

    /// Channel `c` as an `H·W` slice.
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height() * self.width();
        &self.data.data()[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.data.shape() != other.data.shape() {
            return Err(shape_mismatch("image pair", self.data.shape(), other.data.shape()));
        }
        Ok(())
    }
}

/// Latent `[C, H/f, W/f]` produced by the autoencoder.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor {
    data: Tensor,
}

impl LatentTensor {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.shape().len() != 3 {
            return Err(shape_mismatch("latent", &[4, 0, 0], data.shape()));
        }
        if !data.is_finite() {
            return Err(Error::InvalidArgument("latent contains non-finite values".into()));
        }
        Ok(Self { data })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }
}
