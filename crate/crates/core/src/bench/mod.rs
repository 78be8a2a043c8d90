//! Experiment configuration and the benchmark commands behind `fedbench`.
//!
//! A run directory holds `<strategy>/fold<r>/report.csv` and
//! `<strategy>/fold<r>/manifest.json` for every (strategy, fold) pair.
//! Summaries, cost tables and plot series are derived from those files
//! alone.

mod config;
mod experiment;
mod io;
mod stats;
mod summary;

pub use config::{
    env_entries, parse_entries, DatasetSource, ExperimentConfig, PartitionConfig, PartitionKind, ENV_PREFIX,
};
pub use experiment::{cmd_run, fold_inputs, load_dataset, run_job, JobFailure, RunSummary};
pub use io::write_atomic;
pub use stats::{client_stats, cmd_stats, stats_csv, StageStats, StatsInput};
pub use summary::{
    cmd_costs, cmd_summarize, cost_rows, load_runs, summarize, CostRow, FoldCell, LoadedRuns, RunEntry,
    SummaryRow, SummaryTable, PERSONALIZED_BASELINE,
};
