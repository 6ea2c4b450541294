//! Experiment runner and reporting.

pub mod config;
pub mod experiment;
pub mod plots;
pub mod verify;

pub use config::{EvalSection, ExperimentConfig, TrainSection};
pub use experiment::{
    evaluate_fixed, evaluate_instance, eval_instances, read_metrics_csv, rollout_means, run_experiment, run_job, summarize,
    write_metrics_csv, Band, ExperimentReport, InstanceEval, MetricsRow, Summary,
};
pub use plots::emit_plot_data;
pub use verify::{run_suite, verify, SuiteResult, VerifyConfig, VerifyReport, SUITES};
