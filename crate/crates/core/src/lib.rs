//! Source-free domain adaptation for small dense networks.
//!
//! A model is pretrained on a labeled source domain, split so that a
//! batch-norm layer opens the classifier, and then only its encoder is
//! fine-tuned on unlabeled target data. The objective combines the channel
//! averaged Gaussian KL between the classifier's stored BN statistics and
//! the target batch statistics with an information-maximization term.
//!
//! Modules, bottom-up:
//! - [`tensor`], [`rng`]: row-major `f64` arrays, channel moments, seeded streams.
//! - [`nn`]: dense / tanh / batch-norm / softmax layers, the model stack, Adam,
//!   checkpoints.
//! - [`losses`]: label-smoothed cross-entropy, the BN-statistics matching loss,
//!   information maximization and their weighted sum, with gradients.
//! - [`adaptation`]: pretraining, splitting/freezing, adaptation, evaluation.
//! - [`data`]: synthetic covariate-shift benchmarks and CSV datasets.
//! - [`oracle`]: Monte-Carlo KL, quadrature total variation, Pinsker checks,
//!   finite differences.
//! - [`cli`]: the experiment runner behind the `bnmatch` binary.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptation;
pub mod cli;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
