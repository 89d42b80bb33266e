//! Memory-efficient back-propagation for pre-activation networks.
//!
//! The forward pass always runs at full precision through a small pool of
//! reusable buffers. Each layer keeps only a compact copy of its
//! pre-ReLU activations (and its batch variance) for the backward pass:
//! either the exact tensor, or a K-bit fixed-point tape. A naive baseline
//! that feeds the quantized activations forward is provided for
//! comparison.
//!
//! Module map:
//!
//! * [`tensor`]: dense tensors, matmul, direct convolution, channel reductions.
//! * [`quantizer`]: K-bit fixed-point codes and bit packing.
//! * [`prelayer`]: one batch-norm / scale-bias / ReLU / linear layer.
//! * [`engine`]: whole-network passes, the buffer pool and memory accounting.
//! * [`train`]: initialization, SGD, learning-rate schedule, loss, training loop.
//! * [`data`]: CIFAR-10 binary loader, synthetic datasets, augmentation.
//! * [`diag`]: gradient-error and sign-agreement diagnostics, depth sweeps.
//! * [`cli`]: the command-line front end.

pub mod cli;
pub mod config;
pub mod data;
pub mod diag;
pub mod engine;
pub mod error;
mod par;
pub mod prelayer;
pub mod quantizer;
pub mod real;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::{Shape, Tensor};
