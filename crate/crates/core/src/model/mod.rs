//! The shared-weight encoder, the cross/self-attention decoder, the
//! reconstruction projector and the pre-training loss.

mod config;
mod layers;
mod siamese;

pub use config::{Backbone, LossMode, ModelConfig};
pub use layers::{Attention, DecoderLayer, EncoderLayer, FeedForward, LayerNormParams, Linear};
pub use siamese::{PretrainOutput, SiameseModel};

pub(crate) use layers::embedding_init;
