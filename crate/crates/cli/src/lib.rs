//! Run directories, evaluation and sweeps behind the `dsamp` binary.

pub mod run;
pub mod sweep;

pub use run::{build_config, run_eval, run_root, run_train, EvalOptions, RunManifest, TrainOptions};
pub use sweep::{reproduce_plan, run_sweep, summarize_run, write_runs, write_summary, Cell, RunResult, SweepPlan};

/// Environment variable naming the directory that receives run directories.
pub const RUN_ROOT_ENV: &str = "DSAMP_RUN_ROOT";
