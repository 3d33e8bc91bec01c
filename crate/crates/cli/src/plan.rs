//! Validated experiment plans.

use std::path::PathBuf;
use std::time::Duration;

use anyhow::anyhow;
use rxconsensus::backend::DEFAULT_TIMEOUT;
use rxconsensus::chemistry::{Weights, DEFAULT_MIN_OBSERVATIONS};
use rxconsensus::domain::Strategy;
use rxconsensus::store::ReportFormat;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendMode {
    /// Real providers; keys come from the environment.
    Live,
    /// Canned replies from a script file.
    Scripted(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunPlan {
    /// `None` uses the bundled 20-record sample.
    pub dataset: Option<PathBuf>,
    /// `None` uses the bundled reference registry.
    pub registry: Option<PathBuf>,
    pub strategies: Vec<Strategy>,
    pub n: usize,
    pub trials: u32,
    pub seed: u64,
    /// How many dataset records each trial runs, taken from the front.
    pub records: usize,
    pub timeout: Duration,
    pub temperature: Option<f32>,
    pub backend: BackendMode,
    pub prompts: Option<PathBuf>,
    pub chemistry_from: Vec<PathBuf>,
    pub min_observations: usize,
    pub weights: Weights,
    pub out_dir: PathBuf,
    pub format: ReportFormat,
    pub parallel_tasks: bool,
}

impl Default for RunPlan {
    fn default() -> Self {
        RunPlan {
            dataset: None,
            registry: None,
            strategies: vec![Strategy::Local, Strategy::Remote, Strategy::Random],
            n: 3,
            trials: 1,
            seed: 0,
            records: 10,
            timeout: DEFAULT_TIMEOUT,
            temperature: None,
            backend: BackendMode::Live,
            prompts: None,
            chemistry_from: Vec::new(),
            min_observations: DEFAULT_MIN_OBSERVATIONS,
            weights: Weights::default(),
            out_dir: PathBuf::from("."),
            format: ReportFormat::Text,
            parallel_tasks: false,
        }
    }
}

impl RunPlan {
    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |msg: String| Err(CliError::config(anyhow!(msg)));
        if self.strategies.is_empty() {
            return fail("at least one --strategy is required".into());
        }
        if self.trials == 0 {
            return fail("--trials must be at least 1".into());
        }
        if self.n < 2 {
            return fail(format!("--n must be at least 2 for peer review, got {}", self.n));
        }
        if self.records == 0 {
            return fail("--records must be at least 1".into());
        }
        if self.timeout.is_zero() {
            return fail("--timeout-secs must be positive".into());
        }
        if self.strategies.contains(&Strategy::Chemistry) && self.chemistry_from.is_empty() {
            return fail("the CHEMISTRY strategy needs --chemistry-from <logs>".into());
        }
        Ok(())
    }

    /// Strategies in the order given, duplicates dropped.
    pub fn unique_strategies(&self) -> Vec<Strategy> {
        let mut out = Vec::new();
        for s in &self.strategies {
            if !out.contains(s) {
                out.push(*s);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(plan: RunPlan) -> Option<u8> {
        plan.validate().err().map(|e| e.exit_code())
    }

    #[test]
    fn defaults_are_valid() {
        assert_eq!(code(RunPlan::default()), None);
    }

    #[test]
    fn bad_plans_are_config_errors() {
        assert_eq!(code(RunPlan { records: 0, ..RunPlan::default() }), Some(2));
        assert_eq!(code(RunPlan { trials: 0, ..RunPlan::default() }), Some(2));
        assert_eq!(code(RunPlan { n: 1, ..RunPlan::default() }), Some(2));
        assert_eq!(code(RunPlan { strategies: vec![], ..RunPlan::default() }), Some(2));
        let chem = RunPlan {
            strategies: vec![Strategy::Chemistry],
            ..RunPlan::default()
        };
        assert_eq!(code(chem.clone()), Some(2));
        assert_eq!(
            code(RunPlan {
                chemistry_from: vec!["a.jsonl".into()],
                ..chem
            }),
            None
        );
    }

    #[test]
    fn duplicate_strategies_run_once() {
        let p = RunPlan {
            strategies: vec![Strategy::Random, Strategy::Local, Strategy::Random],
            ..RunPlan::default()
        };
        assert_eq!(p.unique_strategies(), [Strategy::Random, Strategy::Local]);
    }
}
