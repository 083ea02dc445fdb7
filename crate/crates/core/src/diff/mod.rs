//! Minimal dense differentiable computation: operators with reverse-mode
//! gradients, ADAM, a plateau scheduler and a finite-difference checker.

mod conv;
pub mod gradcheck;
mod graph;
pub mod optim;
pub mod params;

pub use conv::{conv_out_len, conv_transpose_base_len};
pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use graph::{BatchStats, BnMode, Gradients, Graph, Var, BCE_CLAMP};
pub use optim::{Adam, AdamState, PlateauScheduler};
pub use params::{Bound, ParamId, ParamSet};
