//! Dense 2-D tensors with a reverse-mode tape over the small set of
//! operations the encoder and losses need.

mod checkpoint;
mod gru;
mod optim;
mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
pub use gru::{Gru, GruVars};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;

pub type Shape = (usize, usize);

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("{op}: {message}")]
    Contract { op: &'static str, message: String },
    #[error("backward already ran on this tape")]
    BackwardTwice,
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, KernelError>;
