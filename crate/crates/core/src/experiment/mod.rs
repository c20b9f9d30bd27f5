//! Config-driven runs shared by the CLI and the acceptance tests.

mod commands;
mod config;
mod pipelines;
mod store;

pub use commands::{baseline, complete, gen_data, probe, rollout, superres, train};
pub use config::{BaselineSection, FitSection, Horizon, ModelSection, Paths, RunConfig, TrainSection};
pub use pipelines::{BaselineKind, Context, ProbeRow, RolloutSummary, SuperresRow, TrainSummary, CODE_VERSION};
pub use store::{save_staged, Staged};
