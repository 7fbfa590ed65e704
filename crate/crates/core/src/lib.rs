//! Weakly supervised vision-language pre-training for scene text, at desk
//! scale: a character-aware text encoder, a patch image encoder, a
//! cross-attention-only decoder, and the masked-character plus batch
//! contrastive objective, all on a small reverse-mode autodiff engine.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{OclipError, Result};
