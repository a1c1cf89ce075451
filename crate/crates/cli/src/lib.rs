//! Experiment runner for `seqelbo`: flat TOML configs, experiment dispatch,
//! typed CSV/JSONL output and a run manifest with digests.

pub mod config;
pub mod csvio;
pub mod experiments;
pub mod manifest;

pub use config::{parse_override, resolve, Experiment, ExperimentConfig, Resolved};
pub use experiments::Check;
pub use manifest::{run_experiment, RunManifest, RunReport};
