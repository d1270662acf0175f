//! Two-stage segmentation: a low-capacity fully convolutional pre-processor
//! that learns to normalize raw intensities, feeding a deep fully
//! convolutional residual network, trained with the Dice loss.
//!
//! Everything (tensors, reverse-mode autodiff, layers, optimizer, data
//! pipeline) is implemented on the CPU with no external ML runtime.

pub mod analysis;
pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod mask;
pub mod nn;
pub mod optim;
pub mod params;
pub mod postprocess;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
