//! Cross-architecture knowledge distillation: sequence alignment between a
//! left-padded decoder-only teacher and a student, and the mixed
//! temperature-softened KL / cross-entropy loss.

use serde::{Deserialize, Serialize};

use crate::data::vocab::{BOS, EOS, PAD};
use crate::data::{model_prompt, TaskExample};
use crate::error::{Error, Result};
use crate::model::{GenerateConfig, LogitRows, Model, ModelKind, Sampling};
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::train::{accumulate_grads, AdamW};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(p_s || p_t)`
    Reverse,
    /// `KL(p_t || p_s)`
    Forward,
}

/// Which model writes the sequences the KL term is evaluated on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationSource {
    Student,
    Teacher,
    Dataset,
}

impl std::str::FromStr for KlDirection {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "reverse" => Ok(KlDirection::Reverse),
            "forward" => Ok(KlDirection::Forward),
            o => Err(format!("unknown kl direction `{o}`")),
        }
    }
}

impl std::str::FromStr for GenerationSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "student" => Ok(GenerationSource::Student),
            "teacher" => Ok(GenerationSource::Teacher),
            "dataset" => Ok(GenerationSource::Dataset),
            o => Err(format!("unknown generation source `{o}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KDConfig {
    pub temperature: f64,
    pub alpha: f64,
    pub kl_direction: KlDirection,
    pub generation_source: GenerationSource,
    pub max_gen_len: usize,
    /// Sample generations instead of decoding greedily.
    pub sampling: Option<Sampling>,
}

impl Default for KDConfig {
    fn default() -> Self {
        Self {
            temperature: 2.0,
            alpha: 0.5,
            kl_direction: KlDirection::Reverse,
            generation_source: GenerationSource::Student,
            max_gen_len: 128,
            sampling: None,
        }
    }
}

impl KDConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.max_gen_len == 0 {
            return Err(Error::Config("max_gen_len must be positive".into()));
        }
        Ok(())
    }
}

/// Teacher and student views of one `(x, y)` pair.
///
/// Teacher: `PAD^{n_e} ∘ x ∘ y ∘ PAD^{n_d}`. Student encoder: `x ∘ PAD^{n_e}`;
/// student decoder: `BOS ∘ y ∘ PAD^{n_d}`. Teacher logits from
/// `teacher_slice_start = x_len + n_e - 1` onward predict `y`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignedKDBatch {
    pub teacher_input: Vec<u32>,
    pub teacher_real: Vec<bool>,
    pub student_enc_input: Vec<u32>,
    pub student_enc_real: Vec<bool>,
    pub student_dec_input: Vec<u32>,
    pub student_dec_real: Vec<bool>,
    pub x_len: usize,
    pub y_len: usize,
    pub n_e: usize,
    pub n_d: usize,
    pub teacher_slice_start: usize,
    pub y: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

/// Aligns `(x, y)` to an encoder budget `enc_len` and a decoder budget
/// `dec_len` (not counting BOS); the teacher sequence is `enc_len + dec_len` long.
pub fn build_kd_batch(x: &[u32], y: &[u32], enc_len: usize, dec_len: usize, teacher_len: usize) -> Result<AlignedKDBatch> {
    let (x_len, y_len) = (x.len(), y.len());
    if x_len == 0 || y_len == 0 {
        return Err(Error::Config(format!("empty sequence (x_len {x_len}, y_len {y_len})")));
    }
    if x_len > enc_len {
        return Err(Error::Config(format!("x_len {x_len} exceeds enc_len {enc_len}")));
    }
    if y_len > dec_len {
        return Err(Error::Config(format!("y_len {y_len} exceeds dec_len {dec_len}")));
    }
    let (n_e, n_d) = (enc_len - x_len, dec_len - y_len);
    if x_len + y_len + n_e + n_d != teacher_len {
        return Err(Error::Config(format!(
            "teacher_len {teacher_len} != x_len + y_len + n_e + n_d = {}",
            x_len + y_len + n_e + n_d
        )));
    }
    let mut teacher_input = vec![PAD; n_e];
    teacher_input.extend_from_slice(x);
    teacher_input.extend_from_slice(y);
    teacher_input.resize(teacher_len, PAD);
    let mut teacher_real = vec![false; n_e];
    teacher_real.resize(n_e + x_len + y_len, true);
    teacher_real.resize(teacher_len, false);
    let mut student_enc_input = x.to_vec();
    student_enc_input.resize(enc_len, PAD);
    let mut student_enc_real = vec![true; x_len];
    student_enc_real.resize(enc_len, false);
    let mut student_dec_input = vec![BOS];
    student_dec_input.extend_from_slice(y);
    student_dec_input.resize(1 + dec_len, PAD);
    let mut student_dec_real = vec![true; 1 + y_len];
    student_dec_real.resize(1 + dec_len, false);
    Ok(AlignedKDBatch {
        teacher_input,
        teacher_real,
        student_enc_input,
        student_enc_real,
        student_dec_input,
        student_dec_real,
        x_len,
        y_len,
        n_e,
        n_d,
        teacher_slice_start: x_len + n_e - 1,
        y: y.to_vec(),
        loss_mask: vec![true; y_len],
    })
}

/// Rows `teacher_slice_start .. teacher_slice_start + y_len` of full teacher logits.
pub fn align_teacher_logits<F: Real>(teacher_logits: &Tensor<F>, b: &AlignedKDBatch) -> Result<Tensor<F>> {
    let shape = teacher_logits.shape();
    if shape.len() != 2 || shape[0] != b.teacher_input.len() {
        return Err(Error::Config(format!(
            "teacher logits {shape:?} do not cover the {}-token teacher sequence",
            b.teacher_input.len()
        )));
    }
    let (s, l) = (b.teacher_slice_start, b.y_len);
    if s + l > shape[0] {
        return Err(Error::Config(format!("slice [{s}, {}) out of range {}", s + l, shape[0])));
    }
    let v = shape[1];
    Ok(Tensor::new(vec![l, v], teacher_logits.data()[s * v..(s + l) * v].to_vec())?)
}

/// Full-sequence teacher logits `[teacher_len, V]`, without gradients.
pub fn teacher_logits<F: Real>(teacher: &Model<F>, b: &AlignedKDBatch) -> Result<Tensor<F>> {
    let mut g = Graph::no_grad();
    let l = teacher.forward_decoder_only(&mut g, &b.teacher_input, &b.teacher_real, LogitRows::All)?;
    Ok(g.tensor(l))
}

/// Teacher logits over the aligned slice only, without gradients.
pub fn aligned_teacher_logits<F: Real>(teacher: &Model<F>, b: &AlignedKDBatch) -> Result<Tensor<F>> {
    if teacher.kind() != ModelKind::DecoderOnly {
        return Err(Error::Config("the teacher must be a decoder-only model".into()));
    }
    let mut g = Graph::no_grad();
    let rows = LogitRows::Range {
        start: b.teacher_slice_start,
        len: b.y_len,
    };
    let l = teacher.forward_decoder_only(&mut g, &b.teacher_input, &b.teacher_real, rows)?;
    Ok(g.tensor(l))
}

/// Student logits `[y_len, V]` predicting `y`.
pub fn student_logits<'a, F: Real>(g: &mut Graph<'a, F>, student: &'a Model<F>, b: &AlignedKDBatch) -> Result<Var> {
    Ok(match student.kind() {
        ModelKind::EncoderDecoder => student.forward_seq2seq(
            g,
            &b.student_enc_input,
            &b.student_enc_real,
            &b.student_dec_input,
            &b.student_dec_real,
            LogitRows::Range { start: 0, len: b.y_len },
        )?,
        ModelKind::DecoderOnly => student.forward_decoder_only(
            g,
            &b.teacher_input,
            &b.teacher_real,
            LogitRows::Range {
                start: b.teacher_slice_start,
                len: b.y_len,
            },
        )?,
    })
}

/// `tau^2 * KL` between temperature-softened teacher and student rows.
pub fn kl_term<F: Real>(g: &mut Graph<'_, F>, teacher: Var, student: Var, cfg: &KDConfig, mask: &[bool]) -> Result<Var> {
    let tau = F::of(cfg.temperature);
    let p_t = g.softmax_rows(teacher, tau)?;
    let p_s = g.softmax_rows(student, tau)?;
    let kl = match cfg.kl_direction {
        KlDirection::Reverse => g.kl_rows(p_s, p_t, mask)?,
        KlDirection::Forward => g.kl_rows(p_t, p_s, mask)?,
    };
    Ok(g.scale(kl, F::of(cfg.temperature * cfg.temperature))?)
}

fn combine<F: Real>(g: &mut Graph<'_, F>, alpha: f64, kl: Option<Var>, ce: Option<Var>) -> Result<Var> {
    Ok(match (kl, ce) {
        (Some(kl), None) => g.scale(kl, F::of(alpha))?,
        (None, Some(ce)) => ce,
        (Some(kl), Some(ce)) => {
            let a = g.scale(kl, F::of(alpha))?;
            let b = g.scale(ce, F::of(1.0 - alpha))?;
            g.add(a, b)?
        }
        (None, None) => unreachable!("alpha selects at least one term"),
    })
}

/// `alpha * tau^2 * KL + (1 - alpha) * CE(y, student)`, masked means over rows.
///
/// A weight of exactly 0 or 1 drops the other term, so `alpha = 0` is the
/// plain cross-entropy. The teacher logits should be a constant leaf.
pub fn kd_loss<F: Real>(
    g: &mut Graph<'_, F>,
    teacher_aligned: Var,
    student_logits: Var,
    y: &[u32],
    cfg: &KDConfig,
    loss_mask: &[bool],
) -> Result<Var> {
    cfg.validate()?;
    if g.shape(teacher_aligned) != g.shape(student_logits) {
        return Err(Error::Config(format!(
            "teacher {:?} and student {:?} logits differ in shape",
            g.shape(teacher_aligned),
            g.shape(student_logits)
        )));
    }
    let kl = if cfg.alpha > 0.0 {
        Some(kl_term(g, teacher_aligned, student_logits, cfg, loss_mask)?)
    } else {
        None
    };
    let ce = if cfg.alpha < 1.0 {
        Some(g.cross_entropy_masked(student_logits, y, loss_mask)?)
    } else {
        None
    };
    combine(g, cfg.alpha, kl, ce)
}

/// Target `y ∘ EOS` as used by every loss.
pub fn with_eos(y: &[u32]) -> Vec<u32> {
    let mut t = y.to_vec();
    t.push(EOS);
    t
}

/// Sequence the KL term of an example is evaluated on, or `None` when the
/// KL term is unused.
pub fn kd_sequence(teacher: &Model, student: &Model, ex: &TaskExample, cfg: &KDConfig) -> Result<Option<Vec<u32>>> {
    if cfg.alpha == 0.0 {
        return Ok(None);
    }
    let gen = GenerateConfig {
        sampling: cfg.sampling,
        ..GenerateConfig::greedy(cfg.max_gen_len, EOS)
    };
    Ok(Some(match cfg.generation_source {
        GenerationSource::Dataset => with_eos(&ex.y),
        GenerationSource::Student => student.generate(&model_prompt(student.kind(), &ex.x), &gen)?,
        GenerationSource::Teacher => teacher.generate(&model_prompt(teacher.kind(), &ex.x), &gen)?,
    }))
}

/// Per-batch padding budgets `(enc_len, dec_len)` for KD sequences.
pub fn kd_lengths(examples: &[TaskExample], seqs: &[Option<Vec<u32>>]) -> (usize, usize) {
    let enc = examples.iter().map(|e| e.x.len()).max().unwrap_or(1);
    let gold = examples.iter().map(|e| e.y.len() + 1).max().unwrap_or(1);
    let gen = seqs.iter().flatten().map(Vec::len).max().unwrap_or(1);
    (enc, gold.max(gen))
}

/// Mixed loss of one example: the KL term on `kd_seq`, the cross-entropy on
/// the gold target. When the two sequences coincide a single student forward
/// serves both terms.
pub fn kd_example_loss<'a>(
    g: &mut Graph<'a, f32>,
    teacher: &Model,
    student: &'a Model,
    ex: &TaskExample,
    kd_seq: Option<&[u32]>,
    (enc_len, dec_len): (usize, usize),
    cfg: &KDConfig,
) -> Result<Var> {
    let gold = with_eos(&ex.y);
    // each model sees its own prompt; both get the same padding
    let view = |kind: ModelKind, y: &[u32]| {
        let p = model_prompt(kind, &ex.x);
        let enc = enc_len + p.len() - ex.x.len();
        build_kd_batch(&p, y, enc, dec_len, enc + dec_len)
    };
    let gold_batch = view(student.kind(), &gold)?;
    let Some(seq) = kd_seq else {
        let s = student_logits(g, student, &gold_batch)?;
        return Ok(g.cross_entropy_masked(s, &gold_batch.y, &gold_batch.loss_mask)?);
    };
    let t = aligned_teacher_logits(teacher, &view(teacher.kind(), seq)?)?;
    let t = g.constant(t)?;
    let kd_batch = view(student.kind(), seq)?;
    let s_kd = student_logits(g, student, &kd_batch)?;
    if seq == &gold[..] {
        return kd_loss(g, t, s_kd, &gold_batch.y, cfg, &gold_batch.loss_mask);
    }
    let kl = if cfg.alpha > 0.0 {
        Some(kl_term(g, t, s_kd, cfg, &kd_batch.loss_mask)?)
    } else {
        None
    };
    let ce = if cfg.alpha < 1.0 {
        let s = student_logits(g, student, &gold_batch)?;
        Some(g.cross_entropy_masked(s, &gold_batch.y, &gold_batch.loss_mask)?)
    } else {
        None
    };
    combine(g, cfg.alpha, kl, ce)
}

/// One distillation update on `batch`: build KD sequences, score them under
/// the frozen teacher and update the student. Examples that overflow a
/// capacity are skipped and logged. Returns the mean loss.
pub fn distill_step(
    teacher: &Model,
    student: &mut Model,
    batch: &[TaskExample],
    cfg: &KDConfig,
    optimizer: &mut AdamW,
    lr: f64,
) -> Result<f64> {
    cfg.validate()?;
    if teacher.kind() != ModelKind::DecoderOnly {
        return Err(Error::Config("the teacher must be a decoder-only model".into()));
    }
    let mut grads: Vec<Vec<f32>> = student.params().iter().map(|p| vec![0.0; p.numel()]).collect();
    let (loss, _) = kd_batch_grads(teacher, student, batch, cfg, batch.len(), &mut grads)?;
    let names = student.param_names().to_vec();
    optimizer.step(student.params_mut(), &names, &grads, lr)?;
    Ok(loss)
}

/// Gradients of the mean KD loss over `batch`, each example weighted by
/// `1 / denom`, added to `grads`. Returns `(weighted loss sum, kept examples)`.
pub(crate) fn kd_batch_grads(
    teacher: &Model,
    student: &Model,
    batch: &[TaskExample],
    cfg: &KDConfig,
    denom: usize,
    grads: &mut [Vec<f32>],
) -> Result<(f64, usize)> {
    let mut seqs = Vec::with_capacity(batch.len());
    let mut kept = Vec::with_capacity(batch.len());
    for (i, ex) in batch.iter().enumerate() {
        match kd_sequence(teacher, student, ex, cfg) {
            Ok(s) => {
                seqs.push(s);
                kept.push(i);
            }
            Err(Error::Model(e @ crate::model::ModelError::Capacity { .. })) => {
                log::warn!("skipping KD example {i}: {e}")
            }
            Err(e) => return Err(e),
        }
    }
    let examples: Vec<&TaskExample> = kept.iter().map(|&i| &batch[i]).collect();
    let owned: Vec<TaskExample> = examples.iter().map(|e| (*e).clone()).collect();
    let lens = kd_lengths(&owned, &seqs);
    let mut total = 0.0;
    let mut used = 0;
    for (ex, seq) in owned.iter().zip(&seqs) {
        let mut g = Graph::new();
        let loss = match kd_example_loss(&mut g, teacher, student, ex, seq.as_deref(), lens, cfg) {
            Ok(l) => l,
            Err(Error::Model(e @ crate::model::ModelError::Capacity { .. })) => {
                log::warn!("skipping KD example: {e}");
                continue;
            }
            Err(e) => return Err(e),
        };
        total += g.scalar(loss) as f64 / denom as f64;
        accumulate_grads(&mut g, loss, 1.0 / denom as f64, grads)?;
        used += 1;
    }
    Ok((total, used))
}
