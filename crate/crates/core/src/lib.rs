// SPDX-License-Identifier: MIT OR Apache-2.0

//! Train tiny transformers to explain their own internals.
//!
//! The crate covers the whole desk-scale loop:
//!
//! - [`model`], [`autograd`], [`train`]: a small decoder-only transformer with
//!   residual taps, continuous-token slots and activation patching.
//! - [`sae`]: sparse autoencoders and the SAE / ACT / ΔACT feature sources.
//! - [`describe`]: rule-based simulator, label search, explainer training
//!   for feature descriptions.
//! - [`patching`] and [`ablation`]: activation-patching and hint-ablation
//!   outcome datasets and explainers.
//! - [`baselines`], [`metrics`]: comparison methods and scoring.
//! - [`world`], [`pipeline`]: synthetic data and reproducible stages.

pub mod ablation;
pub mod autograd;
pub mod baselines;
pub mod checkpoint;
pub mod codec;
pub mod describe;
pub mod error;
pub mod explain;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod patching;
pub mod pipeline;
pub mod projection;
pub mod sae;
pub mod tensor;
pub mod train;
pub mod vocab;
pub mod world;

pub use error::{Error, Result};
pub use model::{Intervention, LayerSet, ModelConfig, ResidualTrace, TokenSeq, Transformer};
pub use tensor::Matrix;
