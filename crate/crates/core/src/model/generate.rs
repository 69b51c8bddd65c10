use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::transformer::{LogitRows, Model};
use super::{ModelError, ModelKind};
use crate::data::vocab::BOS;
use crate::tensor::{Graph, Real};

/// Draws tokens from `softmax(logits / temperature)` instead of taking the argmax.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sampling {
    pub temperature: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateConfig {
    pub max_new: usize,
    pub eos: u32,
    /// First decoder input of an encoder-decoder model.
    pub bos: u32,
    pub sampling: Option<Sampling>,
}

impl GenerateConfig {
    pub fn greedy(max_new: usize, eos: u32) -> Self {
        Self {
            max_new,
            eos,
            bos: BOS,
            sampling: None,
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<F: Real>(row: &[F]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

struct Picker {
    rng: Option<(ChaCha8Rng, f64)>,
}

impl Picker {
    fn new(cfg: &GenerateConfig) -> Result<Self, ModelError> {
        if cfg.max_new == 0 {
            return Err(ModelError::Config("max_new must be at least 1".into()));
        }
        let rng = match cfg.sampling {
            Some(s) if !(s.temperature > 0.0) => {
                return Err(ModelError::Config(format!("sampling temperature must be positive, got {}", s.temperature)))
            }
            Some(s) => Some((ChaCha8Rng::seed_from_u64(s.seed), s.temperature)),
            None => None,
        };
        Ok(Self { rng })
    }

    fn pick<F: Real>(&mut self, logits: &[F]) -> u32 {
        let Some((rng, t)) = &mut self.rng else {
            return argmax(logits);
        };
        let max = logits.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|x| ((x.as_f64() - max) / *t).exp()).collect();
        match WeightedIndex::new(&w) {
            Ok(d) => d.sample(rng) as u32,
            Err(_) => argmax(logits),
        }
    }
}

impl<F: Real> Model<F> {
    /// Autoregressive generation on the cached path. Stops after emitting
    /// `eos` (which is included) or after `max_new` tokens.
    pub fn generate(&self, x: &[u32], cfg: &GenerateConfig) -> Result<Vec<u32>, ModelError> {
        let mut picker = Picker::new(cfg)?;
        let mut cache = self.new_cache();
        let mut out = Vec::new();
        match self.kind() {
            ModelKind::EncoderDecoder => {
                let ctx = self.encode_once(x, &vec![true; x.len()])?;
                let mut tok = cfg.bos;
                loop {
                    let logits = self.decode_step(Some(&ctx), &mut cache, tok)?;
                    tok = picker.pick(&logits);
                    out.push(tok);
                    if tok == cfg.eos || out.len() == cfg.max_new {
                        break;
                    }
                }
            }
            ModelKind::DecoderOnly => {
                let mut logits = self.prefill(&mut cache, x)?;
                loop {
                    let tok = picker.pick(&logits);
                    out.push(tok);
                    if tok == cfg.eos || out.len() == cfg.max_new {
                        break;
                    }
                    logits = self.decode_step(None, &mut cache, tok)?;
                }
            }
        }
        Ok(out)
    }

    /// Generation that recomputes the full forward pass for every new token.
    pub fn generate_uncached(&self, x: &[u32], cfg: &GenerateConfig) -> Result<Vec<u32>, ModelError> {
        let mut picker = Picker::new(cfg)?;
        let mut out: Vec<u32> = Vec::new();
        let x_real = vec![true; x.len()];
        loop {
            let mut g = Graph::no_grad();
            let logits = match self.kind() {
                ModelKind::EncoderDecoder => {
                    let mut dec = vec![cfg.bos];
                    dec.extend_from_slice(&out);
                    let real = vec![true; dec.len()];
                    self.forward_seq2seq(&mut g, x, &x_real, &dec, &real, LogitRows::Last)?
                }
                ModelKind::DecoderOnly => {
                    let mut seq = x.to_vec();
                    seq.extend_from_slice(&out);
                    let real = vec![true; seq.len()];
                    self.forward_decoder_only(&mut g, &seq, &real, LogitRows::Last)?
                }
            };
            let tok = picker.pick(g.value(logits));
            out.push(tok);
            if tok == cfg.eos || out.len() == cfg.max_new {
                return Ok(out);
            }
        }
    }

    pub fn greedy_decode(&self, x: &[u32], max_new: usize, eos: u32) -> Result<Vec<u32>, ModelError> {
        self.generate(x, &GenerateConfig::greedy(max_new, eos))
    }
}
