//! Command-line flags and their conversion into plans.

use std::path::PathBuf;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rxconsensus::chemistry::{Weights, DEFAULT_MIN_OBSERVATIONS};
use rxconsensus::domain::Strategy;
use rxconsensus::store::ReportFormat;

use crate::commands::{RecommendPlan, ReportPlan, SynthesizePlan};
use crate::plan::{BackendMode, RunPlan};

#[derive(Debug, Parser)]
#[command(name = "rxconsensus", version)]
#[command(about = "Multi-model medication recommendation with anonymized peer grading")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run sampling strategies over dataset records and log every task
    Run(RunArgs),
    /// Recommend an ensemble from earlier run logs
    Recommend(RecommendArgs),
    /// Compute metrics from run logs
    Report(ReportArgs),
    /// Write clinical vignettes for lists of medications
    Synthesize(SynthesizeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Text,
    Csv,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Json => ReportFormat::Json,
            Format::Text => ReportFormat::Text,
            Format::Csv => ReportFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct WeightArgs {
    /// Weight on mean received grade
    #[arg(long, default_value_t = Weights::default().alpha)]
    pub alpha: f64,
    /// Weight on pairwise grading disagreement
    #[arg(long, default_value_t = Weights::default().beta)]
    pub beta: f64,
    /// Weight on normalized latency
    #[arg(long, default_value_t = Weights::default().gamma)]
    pub gamma: f64,
    /// Graded responses a model needs before it can be chosen
    #[arg(long, default_value_t = DEFAULT_MIN_OBSERVATIONS)]
    pub min_observations: usize,
}

impl WeightArgs {
    fn weights(&self) -> Weights {
        Weights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Dataset JSON file (defaults to the bundled 20-record sample)
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Model registry JSON file (defaults to the bundled reference list)
    #[arg(long)]
    pub registry: Option<PathBuf>,
    /// Sampling strategy; repeat for several
    #[arg(long = "strategy", required = true)]
    pub strategies: Vec<Strategy>,
    /// Ensemble size
    #[arg(long, default_value_t = 3)]
    pub n: usize,
    /// Trials per strategy
    #[arg(long, default_value_t = 1)]
    pub trials: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Records per trial, taken from the start of the dataset
    #[arg(long, default_value_t = 10)]
    pub records: usize,
    /// Deadline per model call, retries included
    #[arg(long, default_value_t = 300)]
    pub timeout_secs: u64,
    /// Sampling temperature sent to providers (provider default if unset)
    #[arg(long)]
    pub temperature: Option<f32>,
    /// Replay canned replies from this script instead of calling providers
    #[arg(long)]
    pub scripted: Option<PathBuf>,
    /// Directory of prompt template overrides
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Run logs used to pick the CHEMISTRY ensemble
    #[arg(long, num_args = 1..)]
    pub chemistry_from: Vec<PathBuf>,
    #[command(flatten)]
    pub weights: WeightArgs,
    /// Logs go to <out-dir>/runs, the report to <out-dir>
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Run a trial's tasks concurrently; per-task timings then overlap
    #[arg(long)]
    pub parallel_tasks: bool,
}

impl RunArgs {
    pub fn into_plan(self) -> RunPlan {
        RunPlan {
            dataset: self.dataset,
            registry: self.registry,
            strategies: self.strategies,
            n: self.n,
            trials: self.trials,
            seed: self.seed,
            records: self.records,
            timeout: Duration::from_secs(self.timeout_secs),
            temperature: self.temperature,
            backend: self.scripted.map_or(BackendMode::Live, BackendMode::Scripted),
            prompts: self.prompts,
            chemistry_from: self.chemistry_from,
            min_observations: self.weights.min_observations,
            weights: self.weights.weights(),
            out_dir: self.out_dir,
            format: self.format.into(),
            parallel_tasks: self.parallel_tasks,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RecommendArgs {
    /// Run log files
    #[arg(required = true)]
    pub logs: Vec<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub n: usize,
    #[command(flatten)]
    pub weights: WeightArgs,
    /// Ranked subsets to include in the report
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    /// Where to write chemistry.json
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

impl RecommendArgs {
    pub fn into_plan(self) -> RecommendPlan {
        RecommendPlan {
            logs: self.logs,
            n: self.n,
            weights: self.weights.weights(),
            min_observations: self.weights.min_observations,
            top_k: self.top_k,
            out_dir: self.out_dir,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Run log files
    #[arg(required = true)]
    pub logs: Vec<PathBuf>,
    /// Dataset with ground truth; effectiveness is omitted without it
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Also write report.{json,txt,csv} here
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

impl ReportArgs {
    pub fn into_plan(self) -> ReportPlan {
        ReportPlan {
            logs: self.logs,
            dataset: self.dataset,
            format: self.format.into(),
            out_dir: self.out_dir,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SynthesizeArgs {
    /// JSON array of medication lists
    #[arg(long)]
    pub medications: PathBuf,
    /// Registry model that writes the vignettes
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub registry: Option<PathBuf>,
    #[arg(long)]
    pub scripted: Option<PathBuf>,
    /// Only the first COUNT lists
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long, default_value_t = 300)]
    pub timeout_secs: u64,
    #[arg(long)]
    pub temperature: Option<f32>,
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Output dataset file
    #[arg(long)]
    pub out: PathBuf,
}

impl SynthesizeArgs {
    pub fn into_plan(self) -> SynthesizePlan {
        SynthesizePlan {
            medications: self.medications,
            registry: self.registry,
            model: self.model,
            backend: self.scripted.map_or(BackendMode::Live, BackendMode::Scripted),
            count: self.count,
            timeout: Duration::from_secs(self.timeout_secs),
            temperature: self.temperature,
            prompts: self.prompts,
            out: self.out,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> RunPlan {
        let cli = Cli::try_parse_from([&["rxconsensus", "run"], args].concat()).unwrap();
        match cli.command {
            Command::Run(a) => a.into_plan(),
            other => panic!("parsed {other:?}"),
        }
    }

    #[test]
    fn run_flags_build_a_plan() {
        let p = run(&[
            "--strategy", "local", "--strategy", "REMOTE", "--trials", "2", "--seed", "9",
            "--scripted", "s.json", "--format", "csv", "--chemistry-from", "a.jsonl", "b.jsonl",
        ]);
        assert_eq!(p.strategies, [Strategy::Local, Strategy::Remote]);
        assert_eq!((p.n, p.trials, p.seed, p.records), (3, 2, 9, 10));
        assert_eq!(p.backend, BackendMode::Scripted("s.json".into()));
        assert_eq!(p.format, ReportFormat::Csv);
        assert_eq!(p.chemistry_from.len(), 2);
        assert_eq!(p.weights, Weights::default());
    }

    #[test]
    fn zero_records_fails_validation() {
        let p = run(&["--strategy", "random", "--records", "0"]);
        assert_eq!(p.validate().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn unknown_strategy_is_rejected() {
        assert!(Cli::try_parse_from(["rxconsensus", "run", "--strategy", "fastest"]).is_err());
    }
}
