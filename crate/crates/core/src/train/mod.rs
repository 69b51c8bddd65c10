//! Optimization: learning-rate schedule, AdamW, the training loop for every
//! objective, checkpoints and metric logs.

mod checkpoint;
mod metrics;
mod optim;
mod schedule;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use metrics::{write_metrics_csv, StepRecord};
pub use optim::AdamW;
pub use schedule::{desk_warmup, lr_at};

use crate::data::{
    batch_lengths, collate_batch, collate_decoder_only, decoder_only_length, DecoderOnlyRow, Seq2SeqRow, TaskExample,
};
use crate::distill::{kd_batch_grads, KDConfig};
use crate::error::{Error, Result};
use crate::model::{LogitRows, Model, ModelKind};
use crate::tensor::{Graph, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    SpanCorruption,
    Seq2Seq,
    Kd,
}

impl std::str::FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "span_corruption" => Ok(Objective::SpanCorruption),
            "seq2seq" => Ok(Objective::Seq2Seq),
            "kd" => Ok(Objective::Kd),
            o => Err(format!("unknown objective `{o}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub seed: u64,
    pub objective: Objective,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 3e-4,
            warmup_steps: 2000,
            total_steps: 10_000,
            batch_size: 8,
            grad_accum_steps: 1,
            seed: 0,
            objective: Objective::Seq2Seq,
            weight_decay: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 {
            return Err(Error::Config("batch_size and grad_accum_steps must be positive".into()));
        }
        if !(self.peak_lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("peak_lr must be positive and weight_decay nonnegative".into()));
        }
        Ok(())
    }

    pub fn examples_per_step(&self) -> usize {
        self.batch_size * self.grad_accum_steps
    }
}

/// Infinite seeded pass over a dataset, reshuffled at every epoch.
#[derive(Clone, Debug)]
pub struct DataStream {
    n: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl DataStream {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("empty training set".into()));
        }
        let mut s = Self {
            n,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.shuffle();
        Ok(s)
    }

    fn shuffle(&mut self) {
        self.order = (0..self.n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.epoch.wrapping_mul(0xA24B_AED4_963E_E407));
        self.order.shuffle(&mut rng);
    }

    pub fn next_index(&mut self) -> usize {
        if self.pos == self.n {
            self.epoch += 1;
            self.pos = 0;
            self.shuffle();
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }

    pub fn take(&mut self, k: usize) -> Vec<usize> {
        (0..k).map(|_| self.next_index()).collect()
    }

    pub fn skip(&mut self, k: usize) {
        for _ in 0..k {
            self.next_index();
        }
    }
}

/// A collated training row for either architecture.
#[derive(Clone, Debug)]
pub enum PreparedRow {
    Seq2Seq(Seq2SeqRow),
    DecoderOnly(DecoderOnlyRow),
}

impl PreparedRow {
    /// Tokens that carry a loss.
    pub fn target_tokens(&self) -> usize {
        match self {
            PreparedRow::Seq2Seq(r) => r.loss_mask.iter().filter(|&&m| m).count(),
            PreparedRow::DecoderOnly(r) => r.targets.len(),
        }
    }

    /// All real tokens processed.
    pub fn real_tokens(&self) -> usize {
        match self {
            PreparedRow::Seq2Seq(r) => {
                r.enc_real.iter().filter(|&&m| m).count() + r.dec_real.iter().filter(|&&m| m).count()
            }
            PreparedRow::DecoderOnly(r) => r.real.iter().filter(|&&m| m).count(),
        }
    }
}

/// Collates `examples` for `kind`, padded to the batch's longest example.
pub fn prepare_rows(kind: ModelKind, examples: &[TaskExample]) -> Result<Vec<PreparedRow>> {
    Ok(match kind {
        ModelKind::EncoderDecoder => {
            let (e, d) = batch_lengths(examples);
            collate_batch(examples, e, d)?.into_iter().map(PreparedRow::Seq2Seq).collect()
        }
        ModelKind::DecoderOnly => collate_decoder_only(examples, decoder_only_length(examples))?
            .into_iter()
            .map(PreparedRow::DecoderOnly)
            .collect(),
    })
}

/// Masked-mean cross-entropy of one prepared row.
pub fn row_loss<'a, F: Real>(g: &mut Graph<'a, F>, model: &'a Model<F>, row: &PreparedRow) -> Result<Var> {
    match (row, model.kind()) {
        (PreparedRow::Seq2Seq(r), ModelKind::EncoderDecoder) => {
            let n = r.loss_mask.iter().take_while(|&&m| m).count();
            let logits = model.forward_seq2seq(
                g,
                &r.enc_ids,
                &r.enc_real,
                &r.dec_ids,
                &r.dec_real,
                LogitRows::Range { start: 0, len: n },
            )?;
            Ok(g.cross_entropy_masked(logits, &r.targets[..n], &r.loss_mask[..n])?)
        }
        (PreparedRow::DecoderOnly(r), ModelKind::DecoderOnly) => {
            let logits = model.forward_decoder_only(
                g,
                &r.ids,
                &r.real,
                LogitRows::Range {
                    start: r.logit_start,
                    len: r.targets.len(),
                },
            )?;
            Ok(g.cross_entropy_masked(logits, &r.targets, &vec![true; r.targets.len()])?)
        }
        _ => Err(Error::Config("row collated for the other architecture".into())),
    }
}

/// Backpropagates `loss` and adds `weight * d loss / d param` to `grads`.
pub fn accumulate_grads<F: Real>(g: &mut Graph<'_, F>, loss: Var, weight: f64, grads: &mut [Vec<F>]) -> Result<()> {
    g.backward(loss)?;
    let w = F::of(weight);
    let keys: Vec<usize> = g.param_keys().collect();
    for k in keys {
        if let Some(gr) = g.param_grad(k) {
            for (a, &b) in grads[k].iter_mut().zip(gr) {
                *a += w * b;
            }
        }
    }
    Ok(())
}

/// Gradient of the mean row loss over `examples`, each weighted `1 / denom`.
/// Returns `(weighted loss sum, real tokens processed)`.
pub fn batch_grads(
    model: &Model,
    examples: &[TaskExample],
    denom: usize,
    grads: &mut [Vec<f32>],
) -> Result<(f64, usize)> {
    let rows = prepare_rows(model.kind(), examples)?;
    let mut total = 0.0;
    let mut tokens = 0;
    for row in &rows {
        let mut g = Graph::new();
        let loss = row_loss(&mut g, model, row)?;
        total += g.scalar(loss) as f64 / denom as f64;
        tokens += row.real_tokens();
        accumulate_grads(&mut g, loss, 1.0 / denom as f64, grads)?;
    }
    Ok((total, tokens))
}

/// Optimizer state plus the number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub optimizer: AdamW,
    pub step: usize,
}

impl TrainState {
    pub fn new(model: &Model, cfg: &TrainConfig) -> Self {
        Self {
            optimizer: AdamW::new(model.params()).with_weight_decay(cfg.weight_decay),
            step: 0,
        }
    }
}

/// Teacher and settings for the `kd` objective.
pub struct KdSetup<'t> {
    pub teacher: &'t Model,
    pub config: KDConfig,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Resume from this state instead of a fresh optimizer.
    pub resume: Option<TrainState>,
    /// Stop once this many steps are complete (defaults to `total_steps`).
    pub stop_at: Option<usize>,
}

/// Runs optimizer steps `state.step + 1 ..` and returns per-step records and
/// the final state. Step `s` consumes `batch_size * grad_accum_steps`
/// examples of the seeded stream and uses `lr_at(s)`.
pub fn train(
    model: &mut Model,
    data: &[TaskExample],
    cfg: &TrainConfig,
    kd: Option<&KdSetup<'_>>,
    opts: TrainOptions,
) -> Result<(Vec<StepRecord>, TrainState)> {
    cfg.validate()?;
    if cfg.objective == Objective::Kd && kd.is_none() {
        return Err(Error::Config("the kd objective needs a teacher".into()));
    }
    if let Some(k) = kd {
        k.config.validate()?;
    }
    let mut state = opts.resume.unwrap_or_else(|| TrainState::new(model, cfg));
    let stop = opts.stop_at.unwrap_or(cfg.total_steps).min(cfg.total_steps);
    let mut stream = DataStream::new(data.len(), cfg.seed)?;
    stream.skip(state.step * cfg.examples_per_step());
    let denom = cfg.examples_per_step();
    let names = model.param_names().to_vec();
    let mut records = Vec::new();
    while state.step < stop {
        let t0 = Instant::now();
        let mut grads: Vec<Vec<f32>> = model.params().iter().map(|p| vec![0.0; p.numel()]).collect();
        let mut loss = 0.0;
        let mut tokens = 0;
        for _ in 0..cfg.grad_accum_steps {
            let micro: Vec<TaskExample> = stream.take(cfg.batch_size).into_iter().map(|i| data[i].clone()).collect();
            let (l, t) = match (cfg.objective, kd) {
                (Objective::Kd, Some(k)) => {
                    let (l, _) = kd_batch_grads(k.teacher, model, &micro, &k.config, denom, &mut grads)?;
                    (l, micro.iter().map(|e| e.x.len() + e.y.len() + 1).sum())
                }
                _ => batch_grads(model, &micro, denom, &mut grads)?,
            };
            loss += l;
            tokens += t;
        }
        let lr = lr_at(state.step + 1, cfg);
        state.optimizer.step(model.params_mut(), &names, &grads, lr)?;
        state.step += 1;
        let secs = t0.elapsed().as_secs_f64().max(1e-9);
        records.push(StepRecord {
            step: state.step,
            loss,
            lr,
            tokens_per_s: tokens as f64 / secs,
        });
        if state.step % 50 == 0 {
            log::info!("step {} loss {loss:.4} lr {lr:.3e}", state.step);
        }
    }
    Ok((records, state))
}
