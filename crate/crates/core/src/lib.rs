//! Longitudinal mixing training (LMT) and `t_mix`-supervised time-aware models
//! for disease-progression prediction.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffcore`]: dense `f64` tensors, a reverse-mode tape, losses, AdamW and
//!   the one-cycle schedule, parameter checkpoints.
//! - [`mixing`]: Beta draws, the mixing operator, eligible-layer selection and
//!   soft labels.
//! - [`progression`]: severity interpolation profiles and time normalization.
//! - [`odesolve`]: RK4 / Dormand–Prince integration and adjoint gradients.
//! - [`timeaware`]: the neural-ODE propagator and the time-modulated LSTM cell.
//! - [`cohort`]: the synthetic longitudinal cohort, consecutive pairs, splits.
//! - [`training`]: encoder and heads, the LMT loss, the three time-aware
//!   training setups, grading runs and downstream probes.
//! - [`metrics`]: quadratic weighted kappa and ROC AUC.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cohort;
pub mod diffcore;
pub mod error;
pub mod metrics;
pub mod mixing;
pub mod odesolve;
pub mod progression;
pub mod timeaware;
pub mod training;

pub use diffcore::{Activation, Gradients, OptimState, ParamId, ParamSet, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use progression::{Profile, SeverityGrade, VisitTime};

/// Number of ICDR severity grades (0 = no DR … 4 = proliferative DR).
pub const NUM_GRADES: usize = 5;
