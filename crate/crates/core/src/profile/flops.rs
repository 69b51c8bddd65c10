//! Analytic matmul cost of the runtime's forward passes.
//!
//! Volumes count `m*k*n` per matmul, the quantity the graph's counters record;
//! FLOPs are twice the volume. Norms, activations, softmax and embedding
//! gathers are not counted. Attention is dense and masked, so a pass over `n`
//! queries and `s` keys costs `2*n*s*d_model` whether or not keys are hidden.

use super::Workload;
use crate::model::{ModelConfig, ModelKind};

fn d(c: &ModelConfig) -> u64 {
    c.d_model as u64
}

/// Self-attention projections plus feed-forward, per token per layer.
fn block_proj(c: &ModelConfig) -> u64 {
    let (d, kv, ff) = (d(c), c.kv_dim() as u64, c.d_ff as u64);
    2 * d * d + 2 * d * kv + 2 * d * ff
}

/// Cross-attention query and output projections, per decoder token per layer.
fn cross_proj(c: &ModelConfig) -> u64 {
    2 * d(c) * d(c)
}

fn logits(c: &ModelConfig, rows: u64) -> u64 {
    rows * d(c) * c.vocab_size as u64
}

/// Encoder over `x` tokens with bidirectional attention.
pub fn encoder_volume(c: &ModelConfig, x: u64) -> u64 {
    c.n_enc_layers as u64 * (x * block_proj(c) + 2 * x * x * d(c))
}

/// Cross-attention keys and values of every decoder layer over `x` encoder states.
pub fn cross_kv_volume(c: &ModelConfig, x: u64) -> u64 {
    c.n_dec_layers as u64 * x * 2 * d(c) * c.kv_dim() as u64
}

/// A decoder chunk of `n` new tokens attending `past + n` self keys (and `x`
/// encoder keys for encoder-decoder models), with `rows` logit rows.
pub fn decoder_chunk_volume(c: &ModelConfig, n: u64, past: u64, x: u64, rows: u64) -> u64 {
    let layers = c.n_dec_layers as u64;
    let mut per_layer = n * block_proj(c) + 2 * n * (past + n) * d(c);
    if c.kind == ModelKind::EncoderDecoder {
        per_layer += n * cross_proj(c) + 2 * n * x * d(c);
    }
    layers * per_layer + logits(c, rows)
}

/// Volume up to the first generated token: the encoder pass, cross K/V and the
/// BOS step for encoder-decoder models; the prefill over `x` for decoder-only.
pub fn prefill_volume(c: &ModelConfig, x: u64) -> u64 {
    match c.kind {
        ModelKind::EncoderDecoder => {
            encoder_volume(c, x) + cross_kv_volume(c, x) + decoder_chunk_volume(c, 1, 0, x, 1)
        }
        ModelKind::DecoderOnly => decoder_chunk_volume(c, x, 0, 0, 1),
    }
}

/// Volume of decode step `j >= 1`, which feeds generated token `j - 1` and
/// produces token `j`.
pub fn decode_step_volume(c: &ModelConfig, x: u64, j: u64) -> u64 {
    match c.kind {
        ModelKind::EncoderDecoder => decoder_chunk_volume(c, 1, j, x, 1),
        ModelKind::DecoderOnly => decoder_chunk_volume(c, 1, x + j - 1, 0, 1),
    }
}

/// Volume of all steps after the first token when generating `y` tokens.
pub fn decode_volume(c: &ModelConfig, x: u64, y: u64) -> u64 {
    (1..y).map(|j| decode_step_volume(c, x, j)).sum()
}

/// Teacher-forced forward over `x` input and `y` target tokens with logits on
/// the `y` target rows.
pub fn train_forward_volume(c: &ModelConfig, x: u64, y: u64) -> u64 {
    match c.kind {
        ModelKind::EncoderDecoder => {
            encoder_volume(c, x) + cross_kv_volume(c, x) + decoder_chunk_volume(c, y, 0, x, y)
        }
        ModelKind::DecoderOnly => decoder_chunk_volume(c, x + y, 0, 0, y),
    }
}

/// `(prefill_flops, decode_flops_total)` for generating `output_len` tokens.
pub fn flops_inference(c: &ModelConfig, w: &Workload) -> (u64, u64) {
    let (x, y, b) = (w.input_len as u64, w.output_len as u64, w.batch_size as u64);
    (2 * b * prefill_volume(c, x), 2 * b * decode_volume(c, x, y))
}

/// FLOPs of one training step: forward plus a backward costed at twice the forward.
pub fn flops_train_step(c: &ModelConfig, w: &Workload) -> u64 {
    let (x, y, b) = (w.input_len as u64, w.output_len as u64, w.batch_size as u64);
    3 * 2 * b * train_forward_volume(c, x, y)
}
