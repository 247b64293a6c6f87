//! Experiment orchestration: configuration, runs and reports.

pub mod config;
pub mod report;
pub mod runner;

pub use config::{AttackKind, DatasetKind, DefenseKind, ExperimentConfig, DATA_DIR_ENV};
pub use report::Report;
pub use runner::{cue_statistics, drive, load_splits, run_cell, run_experiment, CellRun, RunWriter, SeedRun, Splits};
