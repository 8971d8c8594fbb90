//! Experiment orchestration behind the `silab` command line: typed configs, training
//! runs, init-scale sweeps, clipped-mean reports, and the verification suites.

pub mod config;
pub mod run;
pub mod verify;

pub use config::{ExperimentConfig, LossSpec, SinetSpec};
pub use run::{
    cmd_clipstats, cmd_sweep, cmd_train, output_root, run_one, sweep, sweep_into, train_into, RunSummary,
    SweepReport, Variant, OUT_DIR_ENV,
};
pub use verify::{cmd_verify, VerifyReport, MODULES};
