//! Siamese time-series pre-training.
//!
//! A shared-weight transformer encoder is trained to reconstruct a masked
//! current window from an earlier window of the same series, with learnable
//! lineage embeddings tagging how far back the earlier window lies. The
//! pre-trained encoder is then fine-tuned for forecasting or classification,
//! optionally fusing several lineage views of the input.
//!
//! Module map:
//! - [`tensor`]: tensors, reverse-mode tape, Adam, gradient checking
//! - [`data`]: ingestion, splits, normalisation, pair sampling, masking
//! - [`embedding`]: patch/variate tokenisation and lineage matching
//! - [`model`]: encoder, decoder, projector, reconstruction loss
//! - [`training`]: pre-training loop and checkpoints
//! - [`finetune`]: lineage fusion, heads, fine-tuning, metrics, PCA
//! - [`config`]: textual run configuration

pub mod config;
pub mod data;
pub mod embedding;
pub mod error;
pub mod finetune;
pub mod model;
pub mod par;
pub mod tensor;
pub mod training;

pub use error::{CheckpointError, Error, Result};
pub use par::Exec;
pub use tensor::{Scalar, Tensor};
