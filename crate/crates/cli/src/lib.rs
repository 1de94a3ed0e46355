//! Pipeline stages behind the `nucparc` binary.
//!
//! A run directory holds one subdirectory per stage (`phantom`, `cluster`,
//! `features`, `train`, `parcellate`, `sweep`), each closed by a
//! `manifest.toml`.

pub mod config;
pub mod manifest;
pub mod pipeline;

pub use config::{Baseline, RunConfig};
pub use pipeline::{
    cmd_cluster, cmd_features, cmd_parcellate, cmd_phantom, cmd_sweep, cmd_train, run_pipeline, ParcellateOutcome,
    SweepRow, TrainOutcome,
};
