//! Experiment driver: runs sampling strategies over a dataset, recommends
//! ensembles from past logs, reports metrics and synthesizes vignettes.

pub mod args;
pub mod commands;
pub mod error;
pub mod plan;

pub use commands::{
    cmd_recommend, cmd_report, cmd_run, cmd_run_with, cmd_synthesize, RecommendPlan, ReportPlan,
    RunSummary, StrategyTally, SynthesizePlan,
};
pub use error::CliError;
pub use plan::{BackendMode, RunPlan};
