//! Encoder-decoder and decoder-only transformers.
//!
//! Both families share one block: pre-LN self-attention (grouped-query, rotary
//! positions), a pre-LN cross-attention in the decoder of encoder-decoder
//! models, and a pre-LN GELU feed-forward, each with a residual connection.
//! Input and output embeddings are tied.

mod attention;
mod cache;
mod config;
mod generate;
mod rope;
mod transformer;

pub use attention::{attention, visibility, MaskMode};
pub use cache::{EncodedContext, KVCache};
pub use config::{
    count_params, matching_decoder_depth, param_mismatch, ModelConfig, ModelKind, DESK_D_MODEL, DESK_HEADS,
    DESK_KV_HEADS, DESK_MATCHED, DESK_VOCAB,
};
pub use generate::{argmax, GenerateConfig, Sampling};
pub use rope::{ntk_base, rope_apply};
pub use transformer::{build_model, position_ids, LogitRows, Model};

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("capacity exceeded: {what} holds {cap}, needed {len}")]
    Capacity { what: &'static str, len: usize, cap: usize },
}
