//! Experiment harness behind the `sepdiff` command-line tool: run configs,
//! single separations, batch benchmarks and the oracle self-check.

mod config;
mod run;
mod selfcheck;

pub use config::{
    config_hash, ComponentDecl, GaussianDecl, PriorConfig, RunConfig, RunSection, ValueSpec,
    Variant, VoicesConfig,
};
pub use run::{
    cmd_benchmark, cmd_separate, evaluate_mixture, run_benchmark, separate_scaled,
    synthesize_mixture, worker_limit, BenchmarkOutcome, RunRecord, SeparateOutcome, WORKERS_ENV,
};
pub use selfcheck::{check_schedule, cmd_selfcheck, SuiteResult};
