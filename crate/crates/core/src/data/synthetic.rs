//! Synthetic sequence tasks with controllable input/output asymmetry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{span::span_corrupt, vocab::EOS, DataError, MAX_INPUT_LEN, MAX_OUTPUT_LEN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTag {
    Copy,
    Reverse,
    Compress,
    Expand,
    Span,
}

impl TaskTag {
    pub const SYNTHETIC: [TaskTag; 4] = [TaskTag::Copy, TaskTag::Reverse, TaskTag::Compress, TaskTag::Expand];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskTag::Copy => "copy",
            TaskTag::Reverse => "reverse",
            TaskTag::Compress => "compress",
            TaskTag::Expand => "expand",
            TaskTag::Span => "span",
        }
    }
}

impl std::fmt::Display for TaskTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskTag {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "copy" => Ok(TaskTag::Copy),
            "reverse" => Ok(TaskTag::Reverse),
            "compress" => Ok(TaskTag::Compress),
            "expand" => Ok(TaskTag::Expand),
            "span" => Ok(TaskTag::Span),
            other => Err(DataError::Invalid(format!("unknown task tag `{other}`"))),
        }
    }
}

/// One input/target pair. `y` excludes the end-of-sequence token, which
/// collation appends.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskExample {
    pub x: Vec<u32>,
    pub y: Vec<u32>,
    pub task: TaskTag,
}

/// Separator between the repetitions of an `expand` target; outside the
/// task alphabet.
pub const EXPAND_SEP: u32 = b'|' as u32;
/// Every `COMPRESS_STRIDE`-th input token forms a `compress` target.
pub const COMPRESS_STRIDE: usize = 4;

/// Input length range and alphabet of generated tasks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub min_len: usize,
    pub max_len: usize,
    /// Inputs draw from bytes `b'a' .. b'a' + alphabet`.
    pub alphabet: u32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            min_len: 8,
            max_len: 32,
            alphabet: 16,
        }
    }
}

/// Target of `x` under a synthetic task.
pub fn task_target(kind: TaskTag, x: &[u32]) -> Vec<u32> {
    match kind {
        TaskTag::Copy | TaskTag::Span => x.to_vec(),
        TaskTag::Reverse => x.iter().rev().copied().collect(),
        TaskTag::Compress => x.iter().step_by(COMPRESS_STRIDE).copied().collect(),
        TaskTag::Expand => {
            let mut y = Vec::with_capacity(3 * x.len() + 2);
            for r in 0..3 {
                if r > 0 {
                    y.push(EXPAND_SEP);
                }
                y.extend_from_slice(x);
            }
            y
        }
    }
}

/// Largest input length whose target for `kind` fits the output cap
/// (reserving one slot for the end token).
pub fn max_input_for(kind: TaskTag) -> usize {
    let out = MAX_OUTPUT_LEN - 1;
    match kind {
        TaskTag::Copy | TaskTag::Reverse | TaskTag::Span => out,
        TaskTag::Compress => MAX_INPUT_LEN.min(out * COMPRESS_STRIDE),
        TaskTag::Expand => (out - 2) / 3,
    }
}

/// `n` examples of `kind` with inputs of length `spec.min_len ..= spec.max_len`,
/// clamped to the length caps.
pub fn make_synthetic_task_with(
    kind: TaskTag,
    n: usize,
    seed: u64,
    spec: SyntheticSpec,
) -> Result<Vec<TaskExample>, DataError> {
    if n == 0 {
        return Err(DataError::Invalid("n must be at least 1".into()));
    }
    if kind == TaskTag::Span {
        return Err(DataError::Invalid("span examples come from a corpus, not the task generator".into()));
    }
    let hi = spec.max_len.min(max_input_for(kind));
    let lo = spec.min_len.max(1).min(hi);
    if spec.alphabet == 0 || spec.alphabet > 26 {
        return Err(DataError::Invalid(format!("alphabet size {} outside 1..=26", spec.alphabet)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let len = rng.random_range(lo..=hi);
            let x: Vec<u32> = (0..len).map(|_| b'a' as u32 + rng.random_range(0..spec.alphabet)).collect();
            TaskExample {
                y: task_target(kind, &x),
                x,
                task: kind,
            }
        })
        .collect())
}

pub fn make_synthetic_task(kind: TaskTag, n: usize, seed: u64) -> Result<Vec<TaskExample>, DataError> {
    make_synthetic_task_with(kind, n, seed, SyntheticSpec::default())
}

/// Span-corruption example from a document chunk, with the target's
/// trailing end token removed (collation restores it).
pub fn span_example(tokens: &[u32], noise_ratio: f64, span_len: usize, seed: u64) -> Result<TaskExample, DataError> {
    let (x, mut y) = span_corrupt(tokens, noise_ratio, span_len, seed)?;
    if y.last() == Some(&EOS) {
        y.pop();
    }
    Ok(TaskExample {
        x,
        y,
        task: TaskTag::Span,
    })
}
