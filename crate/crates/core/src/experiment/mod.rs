//! Config-driven experiment runs: the breach simulation, the run matrix,
//! persisted artifacts, factor exports and the rendered report.

pub mod analyze;
pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod report;

pub use config::{ExperimentConfig, RunKey};
pub use manifest::{RunManifest, Stage, StageRecord};
pub use pipeline::{paths, AccuracySummary, Experiment, StageOutcome};
