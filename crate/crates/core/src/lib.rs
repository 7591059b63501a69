//! Domain-adaptive pre-training at desk scale: corpus handling, a byte-level
//! BPE tokenizer, a small transformer encoder trained with masked language
//! modelling, binary fine-tuning, evaluation and embedding analysis.

// Validation uses `!(x > 0.0)` so that NaN is rejected too, and the
// numeric kernels index several slices with one loop counter.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod synthetic;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
