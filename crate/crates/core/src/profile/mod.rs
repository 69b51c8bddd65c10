//! Inference and training cost: analytic FLOPs, a KV-cache memory model and
//! wall-clock generation benchmarks.

mod bench;
mod flops;
mod memory;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use bench::{bench_input, bench_pair, summarize, time_generation, BenchSummary, Measurement, WARMUP_TRIALS};
pub use flops::{
    cross_kv_volume, decode_step_volume, decode_volume, decoder_chunk_volume, encoder_volume, flops_inference,
    flops_train_step, prefill_volume, train_forward_volume,
};
pub use memory::{memory_model, CrossKvMode};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub input_len: usize,
    pub output_len: usize,
    pub batch_size: usize,
    /// Bytes per stored value in the memory model (2 for BF16 deployment).
    pub element_bytes: usize,
}

impl Workload {
    pub fn new(input_len: usize, output_len: usize) -> Self {
        Self {
            input_len,
            output_len,
            batch_size: 1,
            element_bytes: 2,
        }
    }

    pub fn with_batch(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size;
        self
    }
}

/// Cost of one architecture on one workload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub label: String,
    pub config: ModelConfig,
    pub workload: Workload,
    pub prefill_flops: u64,
    pub decode_flops_total: u64,
    pub train_step_flops: u64,
    pub kv_bytes_peak: u64,
    pub activation_bytes_model: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_token_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokens_per_s: Option<f64>,
}

impl CostReport {
    /// Analytic-only report; measured fields are absent.
    pub fn analytic(label: &str, config: &ModelConfig, workload: &Workload, mode: CrossKvMode) -> Self {
        let (prefill_flops, decode_flops_total) = flops_inference(config, workload);
        let (kv, act) = memory_model(config, workload, mode);
        Self {
            label: label.to_string(),
            config: config.clone(),
            workload: *workload,
            prefill_flops,
            decode_flops_total,
            train_step_flops: flops_train_step(config, workload),
            kv_bytes_peak: kv,
            activation_bytes_model: act,
            first_token_ms: None,
            tokens_per_s: None,
        }
    }

    pub fn inference_flops(&self) -> u64 {
        self.prefill_flops + self.decode_flops_total
    }

    /// Cache plus stored encoder state.
    pub fn peak_bytes(&self) -> u64 {
        self.kv_bytes_peak + self.activation_bytes_model
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Analytic reports for both models plus measured latency and throughput
/// (`n_trials` medians after the warmups, batch 1).
pub fn bench(a: &Model, b: &Model, workload: &Workload, n_trials: usize) -> Result<(CostReport, CostReport)> {
    let (sa, sb) = bench_pair(a, b, workload.input_len, workload.output_len, n_trials)?;
    let mut ra = CostReport::analytic(a.config().kind.as_str(), a.config(), workload, CrossKvMode::Precomputed);
    let mut rb = CostReport::analytic(b.config().kind.as_str(), b.config(), workload, CrossKvMode::Precomputed);
    ra.first_token_ms = Some(sa.first_token_ms);
    ra.tokens_per_s = sa.tokens_per_s;
    rb.first_token_ms = Some(sb.first_token_ms);
    rb.tokens_per_s = sb.tokens_per_s;
    Ok((ra, rb))
}

/// `enc-dec / dec-only` ratios of inference FLOPs, training FLOPs and peak bytes.
pub fn ratios(ed: &CostReport, dd: &CostReport) -> (f64, f64, f64) {
    (
        ed.inference_flops() as f64 / dd.inference_flops() as f64,
        ed.train_step_flops as f64 / dd.train_step_flops as f64,
        ed.peak_bytes() as f64 / dd.peak_bytes() as f64,
    )
}

pub const SWEEP_COLUMNS: [&str; 17] = [
    "input_len",
    "output_len",
    "encdec_prefill_flops",
    "encdec_decode_flops",
    "encdec_decode_flops_per_token",
    "encdec_train_flops",
    "encdec_kv_bytes",
    "encdec_activation_bytes",
    "deconly_prefill_flops",
    "deconly_decode_flops",
    "deconly_decode_flops_per_token",
    "deconly_train_flops",
    "deconly_kv_bytes",
    "deconly_activation_bytes",
    "inference_ratio",
    "train_ratio",
    "memory_ratio",
];

/// One row per input length; both models evaluated on `(x, output_len)`.
pub fn sweep_rows(ed: &ModelConfig, dd: &ModelConfig, input_lens: &[usize], base: &Workload) -> Vec<Vec<String>> {
    input_lens
        .iter()
        .map(|&x| {
            let w = Workload { input_len: x, ..*base };
            let a = CostReport::analytic("encdec", ed, &w, CrossKvMode::Precomputed);
            let b = CostReport::analytic("deconly", dd, &w, CrossKvMode::Precomputed);
            let (ri, rt, rm) = ratios(&a, &b);
            let per_tok = |r: &CostReport| r.decode_flops_total as f64 / (w.output_len.max(2) - 1) as f64;
            vec![
                x.to_string(),
                w.output_len.to_string(),
                a.prefill_flops.to_string(),
                a.decode_flops_total.to_string(),
                format!("{:.1}", per_tok(&a)),
                a.train_step_flops.to_string(),
                a.kv_bytes_peak.to_string(),
                a.activation_bytes_model.to_string(),
                b.prefill_flops.to_string(),
                b.decode_flops_total.to_string(),
                format!("{:.1}", per_tok(&b)),
                b.train_step_flops.to_string(),
                b.kv_bytes_peak.to_string(),
                b.activation_bytes_model.to_string(),
                format!("{ri:.6}"),
                format!("{rt:.6}"),
                format!("{rm:.6}"),
            ]
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(w: W, ed: &ModelConfig, dd: &ModelConfig, input_lens: &[usize], base: &Workload) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SWEEP_COLUMNS)?;
    for row in sweep_rows(ed, dd, input_lens, base) {
        out.write_record(&row)?;
    }
    out.flush().map_err(|e| Error::io(Path::new("<sweep>"), e))
}
