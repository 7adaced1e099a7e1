//! Reconstruction toolkit for accelerated multi-contrast MRI.
//!
//! The crate is organised bottom-up:
//!
//! - [`kspace`]: centered orthonormal Fourier operators, Cartesian line masks,
//!   zero-filling, k-space filling from a reference contrast and the hard
//!   data-consistency projection.
//! - [`model`]: the cascaded window-attention reconstructor with explicit
//!   reverse-mode gradients.
//! - [`train`]: partition-based self-supervised objectives, the supervised
//!   variant, Adam and the training loop.
//! - [`baselines`]: total-variation compressed sensing.
//! - [`eval`]: retrospective undersampling and per-method metric tables.
//! - [`phantom`]: synthetic paired-contrast phantoms and the on-disk dataset.
//! - [`metrics`]: PSNR and SSIM.

pub mod baselines;
pub mod error;
pub mod eval;
pub mod image;
pub mod kspace;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod train;

pub use error::{Error, Result};
pub use image::{Contrast, ImageSlice, KSpaceGrid};
pub use kspace::SampleMask;
pub use metrics::MetricRow;
pub use model::{ModelConfig, ModelWeights};
pub use train::{LossWeights, TrainConfig, TrainMode};
