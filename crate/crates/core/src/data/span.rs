//! Span corruption: fixed-length spans replaced by sentinels in the input and
//! spelled out, sentinel first, in the target.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::{sentinel, EOS, N_SENTINELS};
use super::DataError;

/// Returns `(input, target)`; `target = S0 span0 S1 span1 ... EOS`.
///
/// The masked token count is `round(len * noise_ratio)` rounded to whole
/// spans of `span_len` (at least one span), and span positions are drawn
/// uniformly among all non-overlapping placements.
pub fn span_corrupt(
    tokens: &[u32],
    noise_ratio: f64,
    span_len: usize,
    seed: u64,
) -> Result<(Vec<u32>, Vec<u32>), DataError> {
    if !(noise_ratio > 0.0 && noise_ratio < 1.0) {
        return Err(DataError::Invalid(format!("noise ratio must lie in (0, 1), got {noise_ratio}")));
    }
    if span_len == 0 {
        return Err(DataError::Invalid("span length must be at least 1".into()));
    }
    let len = tokens.len();
    if len < span_len {
        return Err(DataError::TooShort { len, need: span_len });
    }
    let n_noise = (len as f64 * noise_ratio).round() as usize;
    let mut n_spans = ((n_noise as f64 / span_len as f64).round() as usize).max(1);
    // leave at least one token unmasked whenever possible
    while n_spans > 1 && n_spans * span_len >= len {
        n_spans -= 1;
    }
    if n_spans > N_SENTINELS as usize {
        return Err(DataError::Invalid(format!(
            "{n_spans} spans exceed the {N_SENTINELS} available sentinels"
        )));
    }
    let kept = len - n_spans * span_len;
    let items = kept + n_spans;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_span = vec![false; items];
    for i in rand::seq::index::sample(&mut rng, items, n_spans) {
        is_span[i] = true;
    }
    let mut input = Vec::with_capacity(kept + n_spans);
    let mut target = Vec::with_capacity(n_spans * (span_len + 1) + 1);
    let mut src = 0;
    let mut s = 0;
    for span in is_span {
        if span {
            let tok = sentinel(s).expect("span count checked against sentinel supply");
            input.push(tok);
            target.push(tok);
            target.extend_from_slice(&tokens[src..src + span_len]);
            src += span_len;
            s += 1;
        } else {
            input.push(tokens[src]);
            src += 1;
        }
    }
    target.push(EOS);
    Ok((input, target))
}
