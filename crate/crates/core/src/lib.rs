//! Processing-in-pixel hyperspectral image classification.
//!
//! The crate is `no_std` (with `alloc`) and contains every numerical piece of
//! the pipeline:
//!
//! - [`tensor`] and [`ops`]: dense tensors and the forward/backward kernels
//!   (3-D and 2-D convolution, linear, ReLU, global average pooling, softmax
//!   cross-entropy).
//! - [`optim`]: SGD with momentum and a step learning-rate schedule.
//! - [`pixel`]: behavioral model of the analog pixel, curve fitting of the
//!   element-wise transfer function, and the custom first-layer convolution.
//! - [`quant`]: fake quantization with straight-through gradients.
//! - [`compression`]: layer output geometry and the sensor bandwidth
//!   compression factor.
//! - [`energy`]: MAC counts, peak activation memory and the sensing /
//!   communication / compute energy breakdown.
//! - [`data`] and [`metrics`]: hyperspectral cubes, patches, splits, synthetic
//!   scenes and OA / AA / Kappa.
//! - [`model`] and [`train`]: CNN-3D and CNN-32H architectures, training and
//!   evaluation.
//!
//! File formats and the command-line interface live in the `pip-hsi` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod compression;
pub mod data;
pub mod energy;
pub mod error;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod pixel;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::GradTensor;
