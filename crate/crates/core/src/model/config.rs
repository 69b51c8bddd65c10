use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    EncoderDecoder,
    DecoderOnly,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::EncoderDecoder => "encoder_decoder",
            ModelKind::DecoderOnly => "decoder_only",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "encoder_decoder" => Ok(ModelKind::EncoderDecoder),
            "decoder_only" => Ok(ModelKind::DecoderOnly),
            other => Err(format!("unknown model kind `{other}`")),
        }
    }
}

/// Full architectural description of either model family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub rope_base: f64,
    pub ntk_train_len: usize,
    pub max_enc_len: usize,
    pub max_dec_len: usize,
}

/// Reference dimensions for desk-scale experiments.
pub const DESK_D_MODEL: usize = 256;
pub const DESK_HEADS: usize = 8;
pub const DESK_KV_HEADS: usize = 2;
pub const DESK_VOCAB: usize = 512;

/// Encoder/decoder layer splits of the desk encoder-decoder models, each
/// paired with the decoder-only depth that matches its parameter count.
/// Ordered 1/3-2/3, 1/2-1/2, 2/3-1/3 (encoder share).
pub const DESK_MATCHED: [((usize, usize), usize); 3] = [((4, 8), 14), ((5, 5), 11), ((8, 4), 13)];

impl ModelConfig {
    pub fn encoder_decoder(n_enc: usize, n_dec: usize) -> Self {
        Self {
            kind: ModelKind::EncoderDecoder,
            n_enc_layers: n_enc,
            n_dec_layers: n_dec,
            d_model: DESK_D_MODEL,
            n_heads: DESK_HEADS,
            n_kv_heads: DESK_KV_HEADS,
            d_ff: 4 * DESK_D_MODEL,
            vocab_size: DESK_VOCAB,
            rope_base: 10000.0,
            ntk_train_len: 2048,
            max_enc_len: 1024,
            max_dec_len: 512,
        }
    }

    pub fn decoder_only(n_layers: usize) -> Self {
        Self {
            kind: ModelKind::DecoderOnly,
            n_enc_layers: 0,
            n_dec_layers: n_layers,
            max_enc_len: 1,
            max_dec_len: 2048,
            ..Self::encoder_decoder(0, n_layers)
        }
    }

    /// Same family and layer counts with explicit width.
    pub fn with_dims(mut self, d_model: usize, n_heads: usize, n_kv_heads: usize) -> Self {
        self.d_model = d_model;
        self.n_heads = n_heads;
        self.n_kv_heads = n_kv_heads;
        self.d_ff = 4 * d_model;
        self
    }

    /// The desk matched pairs, as (encoder-decoder, decoder-only).
    pub fn desk_pairs() -> Vec<(ModelConfig, ModelConfig)> {
        DESK_MATCHED
            .iter()
            .map(|&((e, d), l)| (Self::encoder_decoder(e, d), Self::decoder_only(l)))
            .collect()
    }

    /// The 2/3-1/3 pair used by the efficiency experiments.
    pub fn desk_two_thirds_pair() -> (ModelConfig, ModelConfig) {
        let ((e, d), l) = DESK_MATCHED[2];
        (Self::encoder_decoder(e, d), Self::decoder_only(l))
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Width of the key and value projections.
    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.d_head()
    }

    pub fn is_encoder_decoder(&self) -> bool {
        self.kind == ModelKind::EncoderDecoder
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let mut bad = Vec::new();
        for (name, v) in [
            ("n_dec_layers", self.n_dec_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("ntk_train_len", self.ntk_train_len),
            ("max_enc_len", self.max_enc_len),
            ("max_dec_len", self.max_dec_len),
        ] {
            if v == 0 {
                bad.push(format!("{name} must be positive"));
            }
        }
        if !(self.rope_base > 0.0) || !self.rope_base.is_finite() {
            bad.push(format!("rope_base must be positive, got {}", self.rope_base));
        }
        if self.n_heads > 0 && self.d_model % self.n_heads != 0 {
            bad.push(format!("d_model {} % n_heads {} != 0", self.d_model, self.n_heads));
        }
        if self.n_kv_heads > 0 && self.n_heads % self.n_kv_heads != 0 {
            bad.push(format!("n_heads {} % n_kv_heads {} != 0", self.n_heads, self.n_kv_heads));
        }
        if self.n_heads > 0 && self.d_model % self.n_heads == 0 && self.d_head() % 2 != 0 {
            bad.push(format!("d_head {} must be even for rotary embeddings", self.d_head()));
        }
        match self.kind {
            ModelKind::DecoderOnly if self.n_enc_layers != 0 => {
                bad.push(format!("decoder_only requires n_enc_layers == 0, got {}", self.n_enc_layers))
            }
            ModelKind::EncoderDecoder if self.n_enc_layers == 0 => {
                bad.push("encoder_decoder requires n_enc_layers > 0".to_string())
            }
            _ => {}
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Config(bad.join("; ")))
        }
    }
}

/// Exact parameter count of the model `build_model` creates for `cfg`.
///
/// Linear layers carry no bias; every LayerNorm has a gain and a bias. The
/// token embedding is shared by encoder, decoder and the output projection.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let kv = cfg.kv_dim();
    let attn = 2 * d * d + 2 * d * kv;
    let ffn = 2 * d * cfg.d_ff;
    let norm = 2 * d;
    let layer = attn + ffn + 2 * norm;
    let cross = attn + norm;
    let embed = cfg.vocab_size * d;
    match cfg.kind {
        ModelKind::DecoderOnly => embed + cfg.n_dec_layers * layer + norm,
        ModelKind::EncoderDecoder => {
            embed + cfg.n_enc_layers * layer + cfg.n_dec_layers * (layer + cross) + 2 * norm
        }
    }
}

/// Relative parameter mismatch `|a - b| / max(a, b)`.
pub fn param_mismatch(a: &ModelConfig, b: &ModelConfig) -> f64 {
    let (pa, pb) = (count_params(a) as f64, count_params(b) as f64);
    (pa - pb).abs() / pa.max(pb)
}

/// Decoder-only depth whose parameter count is closest to `target`.
pub fn matching_decoder_depth(target: &ModelConfig) -> usize {
    let goal = count_params(target) as f64;
    let probe = |l: usize| {
        let mut c = ModelConfig::decoder_only(l);
        c.d_model = target.d_model;
        c.n_heads = target.n_heads;
        c.n_kv_heads = target.n_kv_heads;
        c.d_ff = target.d_ff;
        c.vocab_size = target.vocab_size;
        (count_params(&c) as f64 - goal).abs()
    };
    let hi = 4 * (target.n_enc_layers + target.n_dec_layers) + 4;
    (1..=hi).min_by(|&a, &b| probe(a).total_cmp(&probe(b))).unwrap_or(1)
}
