//! Experiment plumbing: simulated clock, traces, reference solver,
//! configuration and orchestration.

pub mod config;
pub mod cost;
pub mod experiment;
pub mod reference;
pub mod trace;

pub use config::{AlgorithmName, ExperimentConfig};
pub use cost::CostModel;
pub use experiment::{run_experiment, ExperimentOutcome, Summary};
pub use reference::{reference_solution, Reference};
pub use trace::{Budget, Evaluator, Recorder, RowExtra, Trace, TraceMeta, TraceRow};
