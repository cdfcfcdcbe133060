//! Desk-scale building blocks for fine-tuning a decoder with low-rank adapters
//! and a pooled classification head, plus NF4 storage and text metrics.
//!
//! Everything here is `no_std` with `alloc`; file formats and the command
//! line live in the `ecibench` crate.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autograd;
pub mod eci;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod gradsuite;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod params;
pub mod prompts;
pub mod quant;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Var, IGNORE_INDEX};
pub use error::{Error, Result};
pub use model::{LanguageModel, Model, ModelConfig};
pub use tensor::Tensor;
