//! Reverse-mode differentiation, parameter storage, optimizers, and
//! checkpoints.

mod check;
mod checkpoint;
mod optim;
mod params;
mod tape;

pub use check::{finite_diff_check, GradCheckOptions, GradCheckReport};
pub use checkpoint::{Checkpoint, NamedTensor, MAGIC};
pub use optim::{adam_step, ema_update, AdamConfig, OptimState};
pub use params::{forward_backward, BindMode, Binder, ParamStore};
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, thiserror::Error)]
pub enum GradError {
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: (usize, usize) },
    #[error("non-finite {what}{}", .param.as_ref().map(|p| format!(" at {p}")).unwrap_or_default())]
    NonFinite { what: String, param: Option<String> },
    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),
    #[error("duplicate parameter slot {0}")]
    DuplicateSlot(String),
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
