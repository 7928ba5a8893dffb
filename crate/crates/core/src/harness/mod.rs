//! Experiment orchestration: configuration, the experiment drivers and
//! result emission.

pub mod config;
pub mod emit;
pub mod experiments;

pub use config::ExperimentConfig;
pub use emit::{Report, Table};
pub use experiments::{
    run_bifurcation_sweep, run_contraction, run_couple, run_pde, run_poc_scan, run_simulate, run_thresholds, Output,
    RateBounds,
};
