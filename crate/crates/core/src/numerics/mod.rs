//! Dense tensors, reverse-mode differentiation, Adam, and gradient checking.

mod checkpoint;
mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
};
pub use gradcheck::{grad_check, Coordinate, GradCheckConfig, GradCheckReport};
pub use optim::{adam_step, AdamConfig};
pub use params::{BoundParams, ParamEntry, ParamGrads, ParamId, ParamStore};
pub use tape::{Gradients, Tape, TapeDiagnostics, Var};
pub use tensor::Tensor;

pub(crate) use tape::forward_substitute;
