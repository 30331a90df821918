//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive applied during a forward pass; calling
//! [`Tape::backward`] on a scalar node walks the record in reverse once and
//! returns a [`Gradients`] table. Tapes are single-use: build a new one per
//! optimisation step.

mod gradcheck;
mod optim;
mod tape;

pub use gradcheck::{finite_diff_check, relative_error, GradCheck};
pub use optim::{Optimizer, OptimizerKind, OptimizerState};
pub use tape::{BatchStats, Gradients, Mode, Tape, Var};
