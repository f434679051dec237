//! Large neighborhood search for finite-domain constraint satisfaction with a
//! small self-supervised transformer as the repair operator.
//!
//! The pieces fit together as follows:
//!
//! * [`csp`] holds instances, hard feasibility checks and the differentiable
//!   penalty loss.
//! * [`diff`] computes analytic gradients of that loss.
//! * [`model`] is the transformer (forward, backward, Gumbel sampling,
//!   training, model files).
//! * [`destroy`] and [`repair`] are the LNS operators.
//! * [`lns`] runs the destroy/forward/repair loop.
//! * [`io`] and [`bench`] parse, generate and benchmark instances.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bench;
pub mod csp;
pub mod destroy;
pub mod diff;
pub mod error;
pub mod io;
pub mod lns;
pub mod model;
pub mod repair;

pub use csp::{Assignment, Constraint, ConstraintKind, CspInstance, PenaltyReport, ProblemKind};
pub use destroy::{DestroyContext, DestroyMask, DestroyOperator};
pub use diff::{GradMatrix, LogitMatrix, SoftAssignment};
pub use error::{Error, Result};
pub use lns::{LnsConfig, RunRecord};
pub use model::{ModelConfig, RepairModel, TrainConfig, Trainer};
pub use repair::{RepairOperator, RepairProposal};
