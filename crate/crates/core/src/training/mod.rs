//! Encoder and heads, the LMT loss, the three time-aware training setups,
//! grading runs and downstream evaluation (linear probe, fine-tuning).

mod config;
mod downstream;
mod fit;
mod grading;
mod loss;
mod model;
mod setups;

pub use config::{ClassLoss, LmtConfig, PropagatorKind, Setup, Task};
pub use downstream::{downstream_samples, fine_tune, linear_probe, DownstreamMode, DownstreamResult, DownstreamSample};
pub use fit::{fit, EpochRecord, FitConfig, HasParams, History};
pub use grading::{evaluate_grading, train_grading, GradingMethod, GradingRun};
pub use loss::{
    class_loss, class_loss_value, lmt_loss, mixed_targets, severity_mass, time_consistency, z_mix_forward, BatchDraw,
    PairBatch,
};
pub use model::{Encoder, Heads, Model, Propagator};
pub use setups::{evaluate_next_visit, next_visit_logits, setup_step, train_setup, validation_loss, TrainedModel};
