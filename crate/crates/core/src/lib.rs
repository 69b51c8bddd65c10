//! Encoder-decoder and decoder-only small language models on a minimal
//! autodiff core, with cross-architecture distillation and an inference
//! cost profiler.

pub mod data;
pub mod distill;
mod error;
pub mod eval;
pub mod train;
pub mod model;
pub mod profile;
pub mod select;
pub mod tensor;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
