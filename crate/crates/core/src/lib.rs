//! Numerical core of the StyDeco style-transfer pipeline: tensors and
//! reverse-mode autodiff, LoRA adapters, the toy text encoders and one-step
//! translator, training losses and step, and evaluation metrics.
//!
//! `no_std` (with `alloc`); file formats, networking and the CLI live in the
//! `stydeco` crate.

#![no_std]
extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod autograd;
pub mod batching;
pub mod config;
pub mod error;
pub mod generator;
pub mod image;
pub mod lora;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod perceptual;
pub mod rng;
pub mod separation;
pub mod stub;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod tokenizer;
pub mod train;

pub use config::{ExperimentConfig, TrainingMode};
pub use error::{Error, Result};
pub use image::{ImageTensor, LatentTensor};
pub use tensor::Tensor;
