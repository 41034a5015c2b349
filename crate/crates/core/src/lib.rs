//! In-place text revision by span replacement, steered through on-the-fly
//! optimization of a masked language model's hidden states.
//!
//! The pieces, bottom up:
//! - [`numerics`]: `f64` tensors with tape-based reverse-mode gradients.
//! - [`tokenizer`]: word-level vocabulary with the `[LM-MASK]`/`[PAD]` specials.
//! - [`model`]: micro transformer encoder with an LM head and an attribute
//!   head over the concatenated `[CLS]` states of every layer.
//! - [`training`]: standard and padded masked-LM data, joint fine-tuning.
//! - [`revision`]: gradient-guided span selection, hidden-state update,
//!   clamped greedy infilling, and the iterative revision loop.
//! - [`metrics`]: SARI, BLEU, FKGL, sentence length, and aggregate means.
//! - [`synthdata`]: labeled synthetic corpus with planted attribute tokens.

pub mod corpus;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod revision;
pub mod synthdata;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
