//! Detecting and pruning domain-specific mechanism neurons in small
//! transformer MLPs: autodiff engine, model, synthetic task, training,
//! integrated-gradients attribution, pruning, and evaluation.

pub mod error;
pub mod util;
pub mod tensor;
pub mod model;
pub mod tasks;
pub mod train;
pub mod eval;
pub mod attribution;
pub mod jvp;
pub mod pruning;
pub mod refcheck;
pub mod report;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor};
