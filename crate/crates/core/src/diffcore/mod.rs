//! Dense tensors, reverse-mode differentiation, losses and optimization.

mod checkpoint;
mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
};
pub use gradcheck::{numeric_gradient, relative_error};
pub use optim::{
    adamw_step, onecycle_lr, OptimState, StepOutcome, ONECYCLE_DIV, ONECYCLE_FINAL_DIV,
    ONECYCLE_WARMUP,
};
pub use params::{accumulate_grads, Bound, Linear, ParamId, ParamSet};
pub use tape::{sigmoid, Activation, Gradients, Tape, Var, BCE_EPS};
pub use tensor::Tensor;
