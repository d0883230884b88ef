//! Config-driven training runs, their reports, and ρ sweeps.

mod config;
mod grid;
mod report;
mod train;

pub use config::{ExperimentConfig, SCHEMA_VERSION};
pub use grid::{
    parse_rhos, rho_config, run_grid, switch_epoch_of, DeltaMapRow, GridOutput, GridRun,
    DELTA_MAP_FILE, GRID_FILE,
};
pub use report::{
    describe_schedule, emit_report, read_curves, report_from_dirs, write_curves, Summary,
    CHECKPOINT_FILE, CONFIG_FILE, CURVES_FILE, LEDGER_FILE, MISSING, SUMMARY_FILE,
};
pub use train::{
    epoch_order, evaluate_detector, run_experiment, run_on_dataset, run_with_mode, stack_images,
    train_epoch, EpochRecord, EpochStats, RunOutput, TrainState, TrainingMode,
};
