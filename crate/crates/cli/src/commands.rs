//! The four subcommands as library functions.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Context};
use chrono::Utc;
use log::{info, warn};
use rxconsensus::backend::{
    live_backends, Backends, CallPolicy, Parsed, ResponseSchema, Script, ScriptedClient,
};
use rxconsensus::chemistry::{
    build_agreement, build_profiles, recommend_ensemble, ChemistryReport, ChemistryScore, Weights,
};
use rxconsensus::domain::{validate_entry, MedicationEntry, ModelId, Strategy};
use rxconsensus::metrics::{build_reports, render_csv, render_json, render_text, StrategyReport, PARALLEL_TASKS_KEY};
use rxconsensus::pipeline::{run_task, PromptTemplates, TaskParams, TaskRecord, TaskStatus};
use rxconsensus::sampling::{derive_seed, sample, Registry};
use rxconsensus::scoring::Scorer;
use rxconsensus::store::{
    load_dataset, load_logs, load_registry, write_dataset, write_report, Dataset, DatasetFile,
    DatasetRecord, LogWriter, ReportFormat,
};

use crate::error::CliError;
use crate::plan::{BackendMode, RunPlan};

/// Everything a run needs that comes from files.
pub struct RunContext {
    pub dataset: Dataset,
    pub registry: Registry,
    pub prompts: Arc<PromptTemplates>,
    pub chemistry_hint: Option<ChemistryScore>,
}

impl RunContext {
    pub fn load(plan: &RunPlan) -> Result<Self, CliError> {
        let dataset = match &plan.dataset {
            Some(p) => load_dataset(p)?,
            None => Dataset::sample(),
        };
        if plan.records > dataset.len() {
            return Err(CliError::config(anyhow!(
                "--records {} exceeds the {} records in the dataset",
                plan.records,
                dataset.len()
            )));
        }
        let registry = load_registry_or_reference(plan.registry.as_deref())?;
        let prompts = Arc::new(load_prompts(plan.prompts.as_deref())?);
        let chemistry_hint = if plan.unique_strategies().contains(&Strategy::Chemistry) {
            Some(chemistry_hint(plan, &registry)?)
        } else {
            None
        };
        Ok(RunContext {
            dataset,
            registry,
            prompts,
            chemistry_hint,
        })
    }
}

fn load_registry_or_reference(path: Option<&Path>) -> Result<Registry, CliError> {
    Ok(match path {
        Some(p) => load_registry(p)?,
        None => Registry::reference(),
    })
}

fn load_prompts(dir: Option<&Path>) -> Result<PromptTemplates, CliError> {
    match dir {
        Some(d) => PromptTemplates::load_dir(d)
            .with_context(|| format!("reading prompt templates from {}", d.display()))
            .map_err(CliError::Config),
        None => Ok(PromptTemplates::default()),
    }
}

/// Best subset learned from earlier logs, with members resolved against the
/// registry so they reach the right backends.
fn chemistry_hint(plan: &RunPlan, registry: &Registry) -> Result<ChemistryScore, CliError> {
    let logs = load_logs_checked(&plan.chemistry_from)?;
    let profiles = build_profiles(&logs, plan.min_observations).map_err(CliError::data)?;
    let agreement = build_agreement(&logs);
    let mut best = recommend_ensemble(&profiles, &agreement, plan.n, plan.weights)
        .map_err(CliError::data)?
        .best;
    best.members = best
        .members
        .iter()
        .map(|m| {
            registry.get(m.name()).cloned().ok_or_else(|| {
                CliError::config(anyhow!("chemistry member {} is not in the registry", m.name()))
            })
        })
        .collect::<Result<Vec<ModelId>, _>>()?;
    info!(
        "chemistry ensemble: {} (score {:.4})",
        best.member_names().join(", "),
        best.score
    );
    Ok(best)
}

fn load_logs_checked(paths: &[PathBuf]) -> Result<Vec<TaskRecord>, CliError> {
    let loaded = load_logs(paths)?;
    for c in &loaded.corrupt {
        warn!("{}:{}: skipping unreadable record: {}", c.path.display(), c.line, c.message);
    }
    Ok(loaded.records)
}

pub fn call_policy(timeout: Duration, temperature: Option<f32>) -> CallPolicy {
    CallPolicy {
        timeout,
        temperature,
        ..CallPolicy::default()
    }
}

/// One client per registry model, live or scripted.
pub fn build_backends(
    mode: &BackendMode,
    registry: &Registry,
    policy: CallPolicy,
) -> Result<Backends, CliError> {
    match mode {
        BackendMode::Live => Ok(live_backends(registry, policy, &|k| std::env::var(k).ok())),
        BackendMode::Scripted(path) => {
            let script = Arc::new(Script::load(path).map_err(CliError::config)?);
            let mut b = Backends::new(policy);
            for m in registry.models() {
                b.insert(m.name(), Arc::new(ScriptedClient::new(script.clone())));
            }
            Ok(b)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StrategyTally {
    pub strategy: Strategy,
    pub trials: u32,
    pub tasks: usize,
    pub answers: usize,
    pub failures: usize,
    pub failed_tasks: usize,
    pub log: PathBuf,
}

impl StrategyTally {
    fn add(&mut self, r: &TaskRecord) {
        self.tasks += 1;
        self.answers += r.ok_responses();
        self.failures += r.generation_failures();
        if r.status == TaskStatus::AllGenerationsFailed {
            self.failed_tasks += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub tallies: Vec<StrategyTally>,
    pub report: PathBuf,
}

impl RunSummary {
    pub fn total_answers(&self) -> usize {
        self.tallies.iter().map(|t| t.answers).sum()
    }

    pub fn logs(&self) -> Vec<PathBuf> {
        self.tallies.iter().map(|t| t.log.clone()).collect()
    }
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tallies {
            writeln!(
                f,
                "{}: {} trials, {} tasks, {} answers, {} failed generations, {} failed tasks -> {}",
                t.strategy,
                t.trials,
                t.tasks,
                t.answers,
                t.failures,
                t.failed_tasks,
                t.log.display()
            )?;
        }
        write!(f, "total answers: {}", self.total_answers())
    }
}

pub async fn cmd_run(plan: &RunPlan) -> Result<RunSummary, CliError> {
    cmd_run_with(plan, |_, b| b).await
}

/// Like [`cmd_run`], with a hook to wrap or replace the backends before any
/// call is made.
pub async fn cmd_run_with(
    plan: &RunPlan,
    wrap: impl FnOnce(&Registry, Backends) -> Backends,
) -> Result<RunSummary, CliError> {
    plan.validate()?;
    let ctx = RunContext::load(plan)?;
    let backends = wrap(
        &ctx.registry,
        build_backends(&plan.backend, &ctx.registry, call_policy(plan.timeout, plan.temperature))?,
    );
    let runs = plan.out_dir.join("runs");
    std::fs::create_dir_all(&runs)
        .with_context(|| format!("creating {}", runs.display()))
        .map_err(CliError::Config)?;

    let stamp = Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
    let notes = &ctx.dataset.notes[..plan.records];
    let redact: Vec<String> = ctx.registry.models().map(|m| m.name().to_string()).collect();
    let mut tallies = Vec::new();
    let mut all = Vec::new();

    for strategy in plan.unique_strategies() {
        let path = runs.join(format!("{}-{stamp}.jsonl", strategy.as_str().to_lowercase()));
        let mut log = LogWriter::open(&path)?;
        let mut tally = StrategyTally {
            strategy,
            trials: plan.trials,
            tasks: 0,
            answers: 0,
            failures: 0,
            failed_tasks: 0,
            log: path,
        };
        for trial in 0..plan.trials {
            let ensemble = sample(
                strategy,
                &ctx.registry,
                plan.n,
                derive_seed(plan.seed, &format!("{strategy}/trial-{trial}")),
                ctx.chemistry_hint.as_ref(),
            )
            .map_err(CliError::config)?;
            info!(
                "{strategy} trial {trial}: {}",
                ensemble.members().iter().map(ModelId::name).collect::<Vec<_>>().join(", ")
            );
            let params = TaskParams {
                seed: derive_seed(plan.seed, &format!("trial-{trial}")),
                trial,
                prompts: ctx.prompts.clone(),
                redact: redact.clone(),
                ..TaskParams::default()
            };
            let records = if plan.parallel_tasks {
                let mut rs = futures::future::join_all(
                    notes.iter().map(|n| run_task(n, &ensemble, &backends, &params)),
                )
                .await;
                for r in &mut rs {
                    r.extra.insert(PARALLEL_TASKS_KEY.into(), serde_json::Value::Bool(true));
                }
                rs
            } else {
                let mut rs = Vec::with_capacity(notes.len());
                for n in notes {
                    rs.push(run_task(n, &ensemble, &backends, &params).await);
                }
                rs
            };
            for r in records {
                tally.add(&r);
                log.append(&r)?;
                all.push(r);
            }
        }
        tallies.push(tally);
    }

    let reports = build_reports(&all, Some(&ctx.dataset.truth), &Scorer::default()).map_err(CliError::data)?;
    let report = write_report(&plan.out_dir, plan.format, &render(&reports, plan.format))?;
    Ok(RunSummary { tallies, report })
}

pub fn render(reports: &[StrategyReport], format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => render_json(reports),
        ReportFormat::Text => render_text(reports),
        ReportFormat::Csv => render_csv(reports),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecommendPlan {
    pub logs: Vec<PathBuf>,
    pub n: usize,
    pub weights: Weights,
    pub min_observations: usize,
    pub top_k: usize,
    pub out_dir: Option<PathBuf>,
}

/// Picks the best `n`-model ensemble from past logs and writes
/// `chemistry.json` when an output directory is given.
pub fn cmd_recommend(plan: &RecommendPlan) -> Result<ChemistryReport, CliError> {
    let records = load_logs_checked(&plan.logs)?;
    let profiles = build_profiles(&records, plan.min_observations).map_err(CliError::data)?;
    let agreement = build_agreement(&records);
    let rec = recommend_ensemble(&profiles, &agreement, plan.n, plan.weights).map_err(CliError::data)?;
    let report = ChemistryReport::new(&rec, plan.top_k);
    if let Some(dir) = &plan.out_dir {
        std::fs::create_dir_all(dir)
            .and_then(|_| {
                std::fs::write(
                    dir.join("chemistry.json"),
                    serde_json::to_string_pretty(&report).expect("report serializes"),
                )
            })
            .with_context(|| format!("writing chemistry.json to {}", dir.display()))
            .map_err(CliError::Config)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportPlan {
    pub logs: Vec<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub format: ReportFormat,
    pub out_dir: Option<PathBuf>,
}

/// Renders metrics for every strategy found in the logs.
pub fn cmd_report(plan: &ReportPlan) -> Result<String, CliError> {
    let records = load_logs_checked(&plan.logs)?;
    if records.is_empty() {
        return Err(CliError::data(anyhow!("the logs contain no task records")));
    }
    let dataset = plan.dataset.as_deref().map(load_dataset).transpose()?;
    let reports = build_reports(&records, dataset.as_ref().map(|d| &d.truth), &Scorer::default())
        .map_err(CliError::data)?;
    let out = render(&reports, plan.format);
    if let Some(dir) = &plan.out_dir {
        write_report(dir, plan.format, &out)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesizePlan {
    /// JSON array of medication lists.
    pub medications: PathBuf,
    pub registry: Option<PathBuf>,
    pub model: String,
    pub backend: BackendMode,
    pub count: Option<usize>,
    pub timeout: Duration,
    pub temperature: Option<f32>,
    pub prompts: Option<PathBuf>,
    pub out: PathBuf,
}

/// Writes clinical vignettes for each medication list. Output is always
/// marked unvalidated; failed sets are skipped with a warning.
pub async fn cmd_synthesize(plan: &SynthesizePlan) -> Result<DatasetFile, CliError> {
    let text = std::fs::read_to_string(&plan.medications)
        .with_context(|| format!("reading {}", plan.medications.display()))
        .map_err(CliError::Config)?;
    let sets: Vec<Vec<MedicationEntry>> = serde_json::from_str(&text)
        .with_context(|| format!("{} is not a JSON array of medication lists", plan.medications.display()))
        .map_err(CliError::Config)?;
    if sets.is_empty() || sets.iter().any(Vec::is_empty) {
        return Err(CliError::config(anyhow!(
            "{} must hold at least one non-empty medication list",
            plan.medications.display()
        )));
    }
    for (i, set) in sets.iter().enumerate() {
        for (j, m) in set.iter().enumerate() {
            let v = validate_entry(m);
            if !v.is_empty() {
                return Err(CliError::config(anyhow!("medication list {i}, entry {j}: {v:?}")));
            }
        }
    }
    let registry = load_registry_or_reference(plan.registry.as_deref())?;
    let model = registry
        .get(&plan.model)
        .cloned()
        .ok_or_else(|| CliError::config(anyhow!("model {} is not in the registry", plan.model)))?;
    let prompts = load_prompts(plan.prompts.as_deref())?;
    let backends = build_backends(&plan.backend, &registry, call_policy(plan.timeout, plan.temperature))?;

    let wanted = plan.count.unwrap_or(sets.len()).min(sets.len());
    let mut records = Vec::new();
    for (i, meds) in sets.iter().take(wanted).enumerate() {
        let (system, user) = prompts.synthesis(meds);
        let req = backends.request(&model, ResponseSchema::Vignette, system, user);
        let res = backends.complete(&req).await;
        match res.parsed {
            Some(Parsed::Vignette { text }) => records.push(DatasetRecord {
                id: format!("synth-{:03}", i + 1),
                vignette: text,
                medications: meds.clone(),
            }),
            _ => warn!(
                "medication list {i}: {}: {}",
                res.outcome,
                res.error.unwrap_or_default()
            ),
        }
    }
    if records.len() < wanted {
        warn!("synthesized {} of {} vignettes", records.len(), wanted);
    }
    let file = DatasetFile {
        description: Some("Machine-synthesized vignettes. Not reviewed by a clinician.".into()),
        unvalidated: true,
        records,
    };
    write_dataset(&plan.out, &file)?;
    Ok(file)
}
