//! Padding and mask construction for both architectures.

use super::synthetic::TaskExample;
use super::vocab::{BOS, EOS, PAD};
use super::DataError;
use crate::model::ModelKind;

/// One encoder-decoder training row.
///
/// Encoder: `x ∘ PAD^{n_e}`. Decoder input: `BOS ∘ y ∘ EOS ∘ PAD^{n_d}`.
/// Targets are the decoder input shifted left by one, and the loss mask
/// covers the predictions of `y` and `EOS`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Seq2SeqRow {
    pub enc_ids: Vec<u32>,
    pub enc_real: Vec<bool>,
    pub dec_ids: Vec<u32>,
    pub dec_real: Vec<bool>,
    pub targets: Vec<u32>,
    pub loss_mask: Vec<bool>,
    pub n_e: usize,
    pub n_d: usize,
}

/// One decoder-only training row `x ∘ BOS ∘ y ∘ EOS ∘ PAD^{n_pad}`; the
/// logits at rows `logit_start .. logit_start + targets.len()` predict `y ∘ EOS`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderOnlyRow {
    pub ids: Vec<u32>,
    pub real: Vec<bool>,
    pub logit_start: usize,
    pub targets: Vec<u32>,
    pub n_pad: usize,
}

/// What a model of `kind` conditions on for input `x`. A decoder-only model
/// sees `x ∘ BOS`: without the marker a causal prefix of `x` looks the same
/// as all of it, so the model cannot tell where the answer starts.
pub fn model_prompt(kind: ModelKind, x: &[u32]) -> Vec<u32> {
    let mut p = x.to_vec();
    if kind == ModelKind::DecoderOnly {
        p.push(BOS);
    }
    p
}

fn with_eos(y: &[u32]) -> Vec<u32> {
    let mut t = y.to_vec();
    t.push(EOS);
    t
}

/// Pads every example to `enc_len` encoder and `dec_len` decoder positions.
pub fn collate_batch(examples: &[TaskExample], enc_len: usize, dec_len: usize) -> Result<Vec<Seq2SeqRow>, DataError> {
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            if ex.x.is_empty() || ex.x.len() > enc_len {
                return Err(DataError::Overlong {
                    index: i,
                    what: "encoder input",
                    len: ex.x.len(),
                    cap: enc_len,
                });
            }
            let yb = with_eos(&ex.y);
            // BOS, y, EOS
            if yb.len() + 1 > dec_len {
                return Err(DataError::Overlong {
                    index: i,
                    what: "decoder input",
                    len: yb.len() + 1,
                    cap: dec_len,
                });
            }
            let n_e = enc_len - ex.x.len();
            let n_d = dec_len - 1 - yb.len();
            let mut enc_ids = ex.x.clone();
            enc_ids.resize(enc_len, PAD);
            let mut enc_real = vec![true; ex.x.len()];
            enc_real.resize(enc_len, false);
            let mut dec_ids = vec![BOS];
            dec_ids.extend_from_slice(&yb);
            dec_ids.resize(dec_len, PAD);
            let mut dec_real = vec![true; 1 + yb.len()];
            dec_real.resize(dec_len, false);
            let mut targets = yb.clone();
            targets.resize(dec_len, PAD);
            let mut loss_mask = vec![true; yb.len()];
            loss_mask.resize(dec_len, false);
            Ok(Seq2SeqRow {
                enc_ids,
                enc_real,
                dec_ids,
                dec_real,
                targets,
                loss_mask,
                n_e,
                n_d,
            })
        })
        .collect()
}

/// Tightest `(enc_len, dec_len)` holding every example of a batch.
pub fn batch_lengths(examples: &[TaskExample]) -> (usize, usize) {
    let enc = examples.iter().map(|e| e.x.len()).max().unwrap_or(1);
    let dec = examples.iter().map(|e| e.y.len() + 2).max().unwrap_or(2);
    (enc, dec)
}

/// Concatenates each example into one causal sequence of `seq_len` positions.
pub fn collate_decoder_only(examples: &[TaskExample], seq_len: usize) -> Result<Vec<DecoderOnlyRow>, DataError> {
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let yb = with_eos(&ex.y);
            let prompt = model_prompt(ModelKind::DecoderOnly, &ex.x);
            let used = prompt.len() + yb.len();
            if ex.x.is_empty() || used > seq_len {
                return Err(DataError::Overlong {
                    index: i,
                    what: "decoder-only sequence",
                    len: used,
                    cap: seq_len,
                });
            }
            let logit_start = prompt.len() - 1;
            let mut ids = prompt;
            ids.extend_from_slice(&yb);
            ids.resize(seq_len, PAD);
            let mut real = vec![true; used];
            real.resize(seq_len, false);
            Ok(DecoderOnlyRow {
                ids,
                real,
                logit_start,
                targets: yb,
                n_pad: seq_len - used,
            })
        })
        .collect()
}

pub fn decoder_only_length(examples: &[TaskExample]) -> usize {
    examples.iter().map(|e| e.x.len() + e.y.len() + 2).max().unwrap_or(2)
}
