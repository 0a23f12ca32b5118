//! A small frozen residual transformer used as the black-box model, plus the
//! synthetic few-shot tasks it is tuned on.

mod batch;
mod cache;
mod prompt;
mod task;
mod toy;

pub use batch::Batch;
pub use prompt::{DeepPrompt, PromptOffsets};
pub use task::{Example, FewShotTask, TaskKind, TaskParams};
pub use toy::{Logits, ToyConfig, ToyModel, Trace};

use thiserror::Error;

use crate::projection::ProjectionError;

/// Padding token id.
pub const PAD_ID: u32 = 0;
/// The mask token whose final hidden state is read out.
pub const MASK_ID: u32 = 1;
/// Segment separator for pair-style inputs.
pub const SEP_ID: u32 = 2;
/// First label-word id; label word `c` is `LABEL_WORD_BASE + c`.
pub const LABEL_WORD_BASE: u32 = 3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown token id {id} (vocabulary size {vocab})")]
    UnknownToken { id: u32, vocab: usize },
    #[error("invalid mask position {position} for example {example}")]
    InvalidMaskPosition { example: usize, position: usize },
    #[error("invalid task parameters: {0}")]
    InvalidTask(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Stats(#[from] ProjectionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
