//! Device-uncertainty modelling for compute-in-memory neural accelerators.
//!
//! * [`nn`]: sequential conv/dense networks with reverse-mode gradients.
//! * [`quant`]: fixed-point weight and activation quantization.
//! * [`noise`]: counter-based additive Gaussian weight noise.
//! * [`analysis`]: Monte-Carlo output-change study with Gaussian fit metrics.
//! * [`train`]: noise-injection training (gradient at perturbed weights,
//!   update applied to the clean weights).
//! * [`eval`]: K-sample perturbed accuracy distributions and their reductions.
//! * [`nas`]: recurrent-policy architecture search rewarded by a statistic of
//!   the perturbed accuracy distribution.
//! * [`data`], [`arch`], [`manifest`], [`report`]: datasets, model
//!   descriptions, run provenance and result summaries.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod analysis;
pub mod arch;
pub mod data;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod nas;
pub mod nn;
pub mod noise;
pub mod quant;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
