//! Semantic visual tokenizer training and masked image modeling.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors, a reverse-mode tape, parameters and a
//!   finite-difference gradient checker.
//! - [`vit`]: patchification and a pre-norm vision Transformer with per-layer
//!   activation capture.
//! - [`codebook`]: cosine nearest-code lookup, straight-through quantization,
//!   EMA maintenance and usage statistics.
//! - [`tokenizer`]: the vector-quantized knowledge distillation tokenizer, a
//!   frozen teacher oracle and its training loop.
//! - [`mim`]: block-wise masking, masked token prediction and the CLS
//!   patch-aggregation objective.
//! - [`eval`]: global representations, linear probing and codebook reports.
//! - [`tokens`]: the binary container for tokenized corpora.
//!
//! Supporting modules hold the optimizer, data handling, checkpoints,
//! metrics and run configuration shared by the CLI.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod codebook;
pub mod config;
pub mod data;
mod error;
pub mod eval;
pub mod metrics;
pub mod mim;
pub mod optim;
pub mod tensor;
pub mod tokenizer;
pub mod tokens;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{Graph, ParamStore, Scalar, Tensor, Var};
