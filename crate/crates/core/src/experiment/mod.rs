//! Configuration, sweep scheduling and result persistence for batch runs.

pub mod config;
pub mod output;
pub mod sweep;

pub use config::{parse_config, parse_config_str, ExperimentConfig, LinearParams, ModelChoice};
pub use output::{write_chaos_csv, write_results, SWEEP_CSV_HEADER};
pub use sweep::{
    fit_slopes, run_cell, run_epsilon_sweep, run_m_sweep, truth_seed, CellResult, FitPoint,
    SlopeFit, SweepResult,
};
