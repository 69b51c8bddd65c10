use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::vocab::BOS;
use crate::error::{Error, Result};
use crate::model::{argmax, Model, ModelKind};

/// Wall-clock result of one generation trial.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Measurement {
    /// Input submission to first logits, including the encoder pass or prefill.
    pub first_token_ms: f64,
    /// Decode rate over the tokens after the first; `None` for one-token outputs.
    pub tokens_per_s: Option<f64>,
}

/// Median over valid trials.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchSummary {
    pub first_token_ms: f64,
    pub tokens_per_s: Option<f64>,
    pub valid_trials: usize,
}

pub const WARMUP_TRIALS: usize = 3;

/// Deterministic benchmark input of `len` lowercase bytes.
pub fn bench_input(len: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| b'a' as u32 + rng.random_range(0..26)).collect()
}

/// Generates exactly `output_len` tokens (ignoring end tokens) and times it.
pub fn time_generation(model: &Model, x: &[u32], output_len: usize) -> Result<Measurement> {
    if output_len == 0 {
        return Err(Error::Config("output_len must be positive".into()));
    }
    let mut cache = model.new_cache();
    let start = Instant::now();
    let (ctx, logits) = match model.kind() {
        ModelKind::EncoderDecoder => {
            let ctx = model.encode_once(x, &vec![true; x.len()])?;
            let l = model.decode_step(Some(&ctx), &mut cache, BOS)?;
            (Some(ctx), l)
        }
        ModelKind::DecoderOnly => (None, model.prefill(&mut cache, x)?),
    };
    let mut tok = argmax(&logits);
    let first_token_ms = start.elapsed().as_secs_f64() * 1e3;
    let t1 = Instant::now();
    for _ in 1..output_len {
        let l = model.decode_step(ctx.as_ref(), &mut cache, tok)?;
        tok = argmax(&l);
    }
    let decode_s = t1.elapsed().as_secs_f64();
    Ok(Measurement {
        first_token_ms,
        tokens_per_s: (output_len > 1).then(|| (output_len - 1) as f64 / decode_s.max(1e-12)),
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Aggregates `n_trials` measured trials after the warmups. Failed trials are
/// logged and discarded; fewer than half valid is an error.
pub fn summarize(label: &str, results: Vec<Result<Measurement>>) -> Result<BenchSummary> {
    let n = results.len();
    let mut ok = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(m) => ok.push(m),
            Err(e) => log::warn!("{label}: trial {i} discarded: {e}"),
        }
    }
    if n == 0 || 2 * ok.len() < n {
        return Err(Error::Bench(format!("{label}: only {} of {n} trials valid", ok.len())));
    }
    let tps: Vec<f64> = ok.iter().filter_map(|m| m.tokens_per_s).collect();
    Ok(BenchSummary {
        first_token_ms: median(ok.iter().map(|m| m.first_token_ms).collect()),
        tokens_per_s: (!tps.is_empty()).then(|| median(tps)),
        valid_trials: ok.len(),
    })
}

/// Benchmarks two models on the same input, interleaving their trials so
/// drift in machine speed affects both alike.
pub fn bench_pair(
    a: &Model,
    b: &Model,
    input_len: usize,
    output_len: usize,
    n_trials: usize,
) -> Result<(BenchSummary, BenchSummary)> {
    let x = bench_input(input_len, 7);
    for _ in 0..WARMUP_TRIALS {
        // warmup failures surface in the measured trials
        let _ = time_generation(a, &x, output_len);
        let _ = time_generation(b, &x, output_len);
    }
    let mut ra = Vec::with_capacity(n_trials);
    let mut rb = Vec::with_capacity(n_trials);
    for _ in 0..n_trials {
        ra.push(time_generation(a, &x, output_len));
        rb.push(time_generation(b, &x, output_len));
    }
    Ok((summarize("model A", ra)?, summarize("model B", rb)?))
}
