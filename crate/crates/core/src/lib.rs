//! Memory right-sizing for serverless functions.
//!
//! Offline profiling against a simulated FaaS backend, a multi-output random
//! forest predicting duration, memory use and success from `(memory, payload)`,
//! and online selection of the cheapest feasible memory per invocation.

// Negated comparisons below deliberately treat NaN as a failed check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod domain;
pub mod experiment;
pub mod forest;
pub mod manager;
pub mod optimizer;
pub mod profiler;
pub mod sim;

pub use domain::*;
pub use experiment::{report, run_stream, Report, RunContext, RunLog, Strategy};
pub use forest::{fit_forest, grid_search, Forest, Hyperparams, ParamGrid, Samples};
pub use manager::{Manager, ManagerConfig};
pub use optimizer::{select_configuration, Candidate, SelectionPolicy, SelectionResult};
pub use profiler::{run_profile, Dataset, ProfilePlan};
pub use sim::{presets, Backend, FunctionModel, Simulator};
