//! Mean-teacher semi-supervised semantic segmentation with masked local
//! consistency and multi-scale ensemble pseudo-labels, on a self-contained
//! autodiff stack and a synthetic shapes dataset.

pub mod ablation;
pub mod augment;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod kernels;
pub mod losses;
pub mod masking;
pub mod metrics;
pub mod params;
pub mod pseudo_label;
pub mod segnet;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
