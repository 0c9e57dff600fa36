//! Double-transformer input pruning for table question answering.
//!
//! A small pruning encoder scores every input token with `s = log P(relevant)`,
//! the top-k tokens (or whole columns) are kept, and the scores are added to
//! the attention logits of a larger task encoder so both models learn from a
//! single loss.

pub mod dot;
pub mod encoder;
pub mod error;
pub mod pruning;
pub mod synth;
pub mod table;
pub mod tensor;

pub use error::{DotError, Result};
