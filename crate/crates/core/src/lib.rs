//! Event-contextualized video transformer for temporal action localization.
//!
//! A toy-scale transformer encoder over per-segment video features is guided
//! by three kinds of semantic side information: a whole-video prompt
//! embedding, per-clip sub-event embeddings, and an event graph with temporal
//! anchors. Everything is differentiated by a small tape-based autodiff engine
//! in [`numerics`], trained with AdamW, and scored with temporal-action
//! localization mAP in [`eval`].

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::should_implement_trait
)]

pub mod encoder;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod harness;
pub mod head;
pub mod losses;
pub mod numerics;
pub mod parallel;
pub mod prompt_oracle;

pub use error::{Error, Result};
