//! Tokenization, span corruption, synthetic tasks, corpora and collation.

pub mod collate;
pub mod corpus;
pub mod record;
pub mod span;
pub mod synthetic;
pub mod vocab;

pub use collate::{
    batch_lengths, collate_batch, collate_decoder_only, decoder_only_length, model_prompt, DecoderOnlyRow, Seq2SeqRow,
};
pub use corpus::{read_corpus, span_corruption_examples, synthetic_corpus};
pub use record::{format_record, read_records, write_records};
pub use span::span_corrupt;
pub use synthetic::{
    make_synthetic_task, make_synthetic_task_with, max_input_for, span_example, task_target, SyntheticSpec,
    TaskExample, TaskTag, COMPRESS_STRIDE, EXPAND_SEP,
};

/// Longest input sequence any example may have.
pub const MAX_INPUT_LEN: usize = 1024;
/// Longest target sequence, end token included.
pub const MAX_OUTPUT_LEN: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("sequence of {len} tokens is too short, need at least {need}")]
    TooShort { len: usize, need: usize },
    #[error("example {index}: {what} of {len} tokens exceeds {cap}")]
    Overlong {
        index: usize,
        what: &'static str,
        len: usize,
        cap: usize,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
