//! Micro bidirectional transformer encoder with an LM head and an attribute
//! head, plus a clamped mode that pins chosen positions to given states.

mod checkpoint;
mod encoder;
mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use encoder::{
    attribute_logits, clamp_outside, encode, encode_from, lm_logits, ClampMap, HiddenStateStack,
};
pub use params::{weight_layout, Layer, ModelConfig, ModelParams, Weights};
