//! Minimal reverse-mode automatic differentiation, Adam and checkpoints.

mod adam;
pub mod checkpoint;
mod tape;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamState, ParamGroup, StepDecay};
pub use tape::{concat_cols, concat_rows, euler_xyz, sum_all, GatherIndex, Gradients, Tape, Var};
pub use tensor::Tensor;
