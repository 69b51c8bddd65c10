use serde::{Deserialize, Serialize};

use super::Workload;
use crate::model::{ModelConfig, ModelKind};

/// Whether the decoder keeps each layer's projected cross-attention K/V or
/// recomputes them from the stored encoder output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossKvMode {
    Precomputed,
    Recompute,
}

/// `(kv_bytes_peak, activation_bytes)` at the end of generation.
///
/// Decoder-only: the self-attention cache over `|x| + |y|` positions.
/// Encoder-decoder: the decoder self cache over `|y|`, plus the encoder's
/// final output and, when precomputed, every decoder layer's cross K/V.
pub fn memory_model(c: &ModelConfig, w: &Workload, mode: CrossKvMode) -> (u64, u64) {
    let (x, y) = (w.input_len as u64, w.output_len as u64);
    let per_pos = 2 * c.kv_dim() as u64 * w.batch_size as u64 * w.element_bytes as u64;
    let layers = c.n_dec_layers as u64;
    match c.kind {
        ModelKind::DecoderOnly => (layers * (x + y) * per_pos, 0),
        ModelKind::EncoderDecoder => {
            let enc_out = x * c.d_model as u64 * w.batch_size as u64 * w.element_bytes as u64;
            let cross = match mode {
                CrossKvMode::Precomputed => layers * x * per_pos,
                CrossKvMode::Recompute => 0,
            };
            (layers * y * per_pos, enc_out + cross)
        }
    }
}
