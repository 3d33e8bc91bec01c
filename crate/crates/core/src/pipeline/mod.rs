//! Two-stage execution of one clinical note on one ensemble.
//!
//! Generation fans the note out to every member concurrently. Evaluation
//! has every member review every other member's successful response in a
//! fresh, stateless call that shows only the note and the redacted response.
//! Each author implicitly grades its own response. Consensus over the grade
//! matrix then picks the best answer.

mod matrix;
mod prompts;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{SecondsFormat, Utc};
use futures::future::join_all;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::{Backends, CompletionResult, Outcome, ResponseSchema};
use crate::consensus::{vancouver, ConsensusResult, VancouverParams};
use crate::domain::{duration_ms, ClinicalNote, EnsembleConfig, Grade, Recommendation, Strategy};
use crate::sampling::{derive_seed, seeded_shuffle};

pub use matrix::{GradeCell, GradeMatrix, MatrixError, MatrixItem};
pub use prompts::{render, PromptTemplates, Redactor, REDACTED};

pub const SCHEMA_VERSION: u32 = 1;

/// `0 -> "Response A"`, `25 -> "Response Z"`, `26 -> "Response AA"`.
pub fn response_label(index: usize) -> String {
    let mut n = index + 1;
    let mut letters = Vec::new();
    while n > 0 {
        let rem = (n - 1) % 26;
        letters.push((b'A' + rem as u8) as char);
        n = (n - 1) / 26;
    }
    letters.reverse();
    format!("Response {}", letters.into_iter().collect::<String>())
}

#[derive(Debug, Clone)]
pub struct TaskParams {
    /// Trial-level seed; per-task randomness derives from it and the note id.
    pub seed: u64,
    pub trial: u32,
    pub implicit_self_grades: bool,
    pub vancouver: VancouverParams,
    pub prompts: Arc<PromptTemplates>,
    /// Names scrubbed from anything a reviewer sees, on top of the ensemble's.
    pub redact: Vec<String>,
}

impl Default for TaskParams {
    fn default() -> Self {
        TaskParams {
            seed: 0,
            trial: 0,
            implicit_self_grades: true,
            vancouver: VancouverParams::default(),
            prompts: Arc::new(PromptTemplates::default()),
            redact: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationOutput {
    /// One result per ensemble member, in member order.
    pub results: Vec<CompletionResult>,
    /// Member name to anonymous label, for ok responses only.
    pub labels: BTreeMap<String, String>,
}

impl GenerationOutput {
    pub fn label_of(&self, model: &str) -> Option<&str> {
        self.labels.get(model).map(String::as_str)
    }

    pub fn author_of(&self, label: &str) -> Option<&CompletionResult> {
        let (name, _) = self.labels.iter().find(|(_, l)| l.as_str() == label)?;
        self.results.iter().find(|r| r.model.name() == name)
    }

    pub fn ok_count(&self) -> usize {
        self.labels.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Generation,
    Review,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: Stage,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item: Option<String>,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(flatten)]
    pub result: CompletionResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub grader: String,
    pub item: String,
    pub outcome: Outcome,
    #[serde(rename = "elapsed_ms", with = "duration_ms")]
    pub elapsed: Duration,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grade: Option<f64>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub critique: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationOutput {
    pub matrix: GradeMatrix,
    pub reviews: Vec<ReviewRecord>,
    pub failures: Vec<Failure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedAnswer {
    pub label: String,
    pub model: String,
    pub recommendation: Recommendation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskStatus {
    Completed,
    AllGenerationsFailed,
}

/// Wall-clock facts about a task. Kept apart from everything else so that
/// deterministic replays can mask exactly this field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WallClock {
    pub started_at: String,
    pub finished_at: String,
    pub generation_ms: u64,
    pub evaluation_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub schema_version: u32,
    pub strategy: Strategy,
    pub trial: u32,
    pub note_id: String,
    pub ensemble: EnsembleConfig,
    pub task_seed: u64,
    pub status: TaskStatus,
    pub generations: Vec<GenerationRecord>,
    pub reviews: Vec<ReviewRecord>,
    pub grades: GradeMatrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consensus: Option<ConsensusResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected: Option<SelectedAnswer>,
    pub failures: Vec<Failure>,
    pub timing: WallClock,
    /// Fields written by newer versions, preserved verbatim on rewrite.
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl TaskRecord {
    pub fn ok_responses(&self) -> usize {
        self.generations.iter().filter(|g| g.result.is_ok()).count()
    }

    pub fn generation_failures(&self) -> usize {
        self.failures
            .iter()
            .filter(|f| f.stage == Stage::Generation)
            .count()
    }

    /// Consensus grade of the selected answer; 0 for failed tasks.
    pub fn selected_quality(&self) -> f64 {
        match (&self.selected, &self.consensus) {
            (Some(sel), Some(c)) => c.consensus_grade.get(&sel.label).copied().unwrap_or(0.0),
            _ => 0.0,
        }
    }
}

pub async fn generation_stage(
    note: &ClinicalNote,
    ensemble: &EnsembleConfig,
    backends: &Backends,
    params: &TaskParams,
    task_seed: u64,
) -> GenerationOutput {
    let (system, user) = params.prompts.generation(note);
    let requests: Vec<_> = ensemble
        .members()
        .iter()
        .map(|m| backends.request(m, ResponseSchema::Recommendation, system.clone(), user.clone()))
        .collect();
    let results = join_all(requests.iter().map(|r| backends.complete(r))).await;

    let mut ok: Vec<&str> = results
        .iter()
        .filter(|r| r.is_ok())
        .map(|r| r.model.name())
        .collect();
    // Sorted first so labels do not depend on member order.
    ok.sort_unstable();
    seeded_shuffle(&mut ok, task_seed);
    let labels = ok
        .into_iter()
        .enumerate()
        .map(|(i, name)| (name.to_string(), response_label(i)))
        .collect();
    GenerationOutput { results, labels }
}

pub async fn evaluation_stage(
    note: &ClinicalNote,
    gen: &GenerationOutput,
    ensemble: &EnsembleConfig,
    backends: &Backends,
    params: &TaskParams,
) -> EvaluationOutput {
    let redactor = Redactor::new(
        ensemble
            .members()
            .iter()
            .map(|m| m.name().to_string())
            .chain(params.redact.iter().cloned()),
    );

    let items: Vec<(String, String)> = gen
        .labels
        .iter()
        .map(|(author, label)| (label.clone(), author.clone()))
        .collect();
    let mut matrix = GradeMatrix::new(ensemble.members().to_vec(), items.iter().cloned())
        .expect("labels are unique and authored by members");

    let mut jobs = Vec::new();
    for (label, author) in &items {
        let rec = gen
            .author_of(label)
            .and_then(CompletionResult::recommendation)
            .expect("labelled responses are parsed recommendations");
        let (system, user) = params.prompts.review(note, &redactor.render_recommendation(rec));
        // Only members that produced a response review: failed generators
        // drop out of the task entirely.
        for reviewer in ensemble
            .members()
            .iter()
            .filter(|m| m.name() != author && gen.labels.contains_key(m.name()))
        {
            let req = backends.request(reviewer, ResponseSchema::Review, system.clone(), user.clone());
            jobs.push((label.clone(), req));
        }
    }
    let results = join_all(jobs.iter().map(|(_, req)| backends.complete(req))).await;

    let mut reviews = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for ((item, _), r) in jobs.iter().zip(results) {
        let grader = r.model.name().to_string();
        match r.verdict() {
            Some(v) => {
                matrix
                    .insert(&grader, item, v.grade)
                    .expect("reviewers never grade their own response");
            }
            None => failures.push(Failure {
                stage: Stage::Review,
                model: grader.clone(),
                item: Some(item.clone()),
                outcome: r.outcome,
                error: r.error.clone(),
            }),
        }
        reviews.push(ReviewRecord {
            grader,
            item: item.clone(),
            outcome: r.outcome,
            elapsed: r.elapsed,
            grade: r.verdict().map(|v| v.grade.value()),
            critique: r.verdict().map(|v| v.critique.clone()).unwrap_or_default(),
        });
    }
    if params.implicit_self_grades {
        for (label, author) in &items {
            matrix
                .insert(author, label, Grade::implicit_self())
                .expect("author cell is free");
        }
    }
    reviews.sort_by(|a, b| (&a.item, &a.grader).cmp(&(&b.item, &b.grader)));
    failures.sort_by(|a, b| (&a.item, &a.model).cmp(&(&b.item, &b.model)));
    EvaluationOutput {
        matrix,
        reviews,
        failures,
    }
}

/// Highest consensus grade wins; ties go to the faster author, then to the
/// lexicographically smaller label. Responses without a consensus grade
/// rank below every graded one.
pub fn select_best(consensus: Option<&ConsensusResult>, gen: &GenerationOutput) -> Option<String> {
    let score = |label: &str| {
        consensus
            .and_then(|c| c.consensus_grade.get(label).copied())
            .unwrap_or(f64::NEG_INFINITY)
    };
    let elapsed = |label: &str| gen.author_of(label).map(|r| r.elapsed).unwrap_or(Duration::MAX);
    gen.labels
        .values()
        .min_by(|a, b| {
            score(b)
                .total_cmp(&score(a))
                .then_with(|| elapsed(a).cmp(&elapsed(b)))
                .then_with(|| a.cmp(b))
        })
        .cloned()
}

pub async fn run_task(
    note: &ClinicalNote,
    ensemble: &EnsembleConfig,
    backends: &Backends,
    params: &TaskParams,
) -> TaskRecord {
    let started_at = Utc::now();
    let task_seed = derive_seed(params.seed, &note.id);

    let clock = Instant::now();
    let gen = generation_stage(note, ensemble, backends, params, task_seed).await;
    let generation_ms = clock.elapsed().as_millis() as u64;

    let mut failures: Vec<Failure> = gen
        .results
        .iter()
        .filter(|r| !r.is_ok())
        .map(|r| Failure {
            stage: Stage::Generation,
            model: r.model.name().to_string(),
            item: None,
            outcome: r.outcome,
            error: r.error.clone(),
        })
        .collect();

    let clock = Instant::now();
    let (matrix, reviews) = if gen.ok_count() > 0 {
        let eval = evaluation_stage(note, &gen, ensemble, backends, params).await;
        failures.extend(eval.failures);
        (eval.matrix, eval.reviews)
    } else {
        (
            GradeMatrix::new(ensemble.members().to_vec(), std::iter::empty())
                .expect("empty matrix is valid"),
            Vec::new(),
        )
    };
    let evaluation_ms = clock.elapsed().as_millis() as u64;

    let consensus = if matrix.is_empty() {
        None
    } else {
        vancouver(&matrix.retain_graded(), &params.vancouver).ok()
    };
    let selected = select_best(consensus.as_ref(), &gen).map(|label| {
        let author = gen.author_of(&label).expect("label has an author");
        SelectedAnswer {
            model: author.model.name().to_string(),
            recommendation: author
                .recommendation()
                .cloned()
                .expect("labelled responses are parsed"),
            label,
        }
    });

    let generations = gen
        .results
        .iter()
        .map(|r| GenerationRecord {
            label: gen.label_of(r.model.name()).map(str::to_string),
            result: r.clone(),
        })
        .collect();

    TaskRecord {
        schema_version: SCHEMA_VERSION,
        strategy: ensemble.strategy(),
        trial: params.trial,
        note_id: note.id.clone(),
        ensemble: ensemble.clone(),
        task_seed,
        status: if gen.ok_count() == 0 {
            TaskStatus::AllGenerationsFailed
        } else {
            TaskStatus::Completed
        },
        generations,
        reviews,
        grades: matrix,
        consensus,
        selected,
        failures,
        timing: WallClock {
            started_at: started_at.to_rfc3339_opts(SecondsFormat::Millis, true),
            finished_at: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
            generation_ms,
            evaluation_ms,
        },
        extra: BTreeMap::new(),
    }
}
