//! Transformer framework for multivariate time series.
//!
//! Provides a minimal reverse-mode autodiff tensor engine, a transformer
//! encoder with batch-normalized blocks and padding-masked self-attention,
//! geometric-segment noise mask generators for denoising pretraining,
//! UEA/UCR archive ingestion, training loops (pretrain / supervised /
//! fine-tune), checkpointing, and evaluation metrics.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod presets;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
