//! Plain-text corpora: newline-delimited documents, plus a seeded generator
//! of pseudo-text for desk pretraining.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::synthetic::{span_example, TaskExample};
use super::vocab::tokenize;
use super::DataError;

/// Non-empty lines of a UTF-8 text file, tokenized.
pub fn read_corpus(path: &Path) -> Result<Vec<Vec<u32>>, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| tokenize(l.as_bytes()))
        .collect())
}

const WORDS: [&str; 48] = [
    "the", "of", "and", "a", "to", "in", "is", "that", "for", "it", "as", "with", "was", "on", "be", "by", "this",
    "are", "from", "or", "an", "model", "data", "energy", "water", "light", "cell", "plant", "earth", "system",
    "small", "large", "between", "through", "during", "students", "learn", "grows", "moves", "changes", "heat",
    "river", "forest", "history", "number", "study", "simple", "often",
];

/// `n_docs` pseudo-English documents of roughly `approx_len` bytes each.
///
/// Word choice is Zipf-like so the text has the skewed unigram statistics a
/// small language model can pick up quickly.
pub fn synthetic_corpus(n_docs: usize, approx_len: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (1..=WORDS.len()).map(|r| 1.0 / r as f64).collect();
    let total: f64 = weights.iter().sum();
    (0..n_docs)
        .map(|_| {
            let mut doc = String::new();
            let mut since_stop = 0;
            while doc.len() < approx_len {
                let mut u = rng.random::<f64>() * total;
                let mut w = WORDS[WORDS.len() - 1];
                for (word, &wt) in WORDS.iter().zip(&weights) {
                    if u < wt {
                        w = word;
                        break;
                    }
                    u -= wt;
                }
                if !doc.is_empty() {
                    doc.push(' ');
                }
                doc.push_str(w);
                since_stop += 1;
                if since_stop > 5 && rng.random::<f64>() < 0.2 {
                    doc.push('.');
                    since_stop = 0;
                }
            }
            doc
        })
        .collect()
}

/// Splits documents into `chunk_len`-token pieces and span-corrupts each.
/// Pieces too short to corrupt are skipped with a warning.
pub fn span_corruption_examples(
    docs: &[Vec<u32>],
    chunk_len: usize,
    noise_ratio: f64,
    span_len: usize,
    seed: u64,
) -> Result<Vec<TaskExample>, DataError> {
    if chunk_len == 0 {
        return Err(DataError::Invalid("chunk length must be positive".into()));
    }
    let mut out = Vec::new();
    let mut k = 0u64;
    for doc in docs {
        for chunk in doc.chunks(chunk_len) {
            let s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k);
            k += 1;
            match span_example(chunk, noise_ratio, span_len, s) {
                Ok(ex) => out.push(ex),
                Err(DataError::TooShort { len, need }) => {
                    log::warn!("skipping {len}-token chunk, span corruption needs {need}")
                }
                Err(e) => return Err(e),
            }
        }
    }
    if out.is_empty() {
        return Err(DataError::Invalid("corpus produced no span-corruption examples".into()));
    }
    Ok(out)
}
