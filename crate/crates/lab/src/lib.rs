//! Experiment harness: JSON specs in, CSV and JSON out.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod error;
pub mod output;
pub mod spec;
pub mod stats;
pub mod trajectory;

pub use commands::{run, Check, Context, Report};
pub use error::{LabError, LabResult};
pub use spec::{CommandKind, ExperimentSpec};
