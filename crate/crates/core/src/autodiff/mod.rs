//! Reverse-mode differentiation, multi-layer perceptrons, an adaptive-moment
//! optimizer and the checkpoint container that persists parameters.

mod checkpoint;
mod gradcheck;
mod mlp;
mod optim;
mod tape;
mod tensor;

use thiserror::Error;

pub use checkpoint::{Checkpoint, NamedArray, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, GradCheckReport};
pub use mlp::{mlp_forward, Activation, BoundMlp, Layer, MlpParams};
pub use optim::{AdamSettings, OptimState};
pub use tape::{Gradients, Tape, Value};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },
    #[error("{len} values cannot fill a {rows}x{cols} tensor")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("{0}: no operands")]
    EmptyOperands(&'static str),
    #[error("backward needs a scalar root, got shape {0:?}")]
    NonScalarRoot([usize; 2]),
    #[error("tape already used for a backward pass")]
    TapeConsumed,
    #[error("value belongs to a different tape")]
    ForeignValue,
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("layer layout mismatch: {0}")]
    Layout(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
