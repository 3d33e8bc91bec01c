//! Helpers shared by the integration and acceptance tests: an independent
//! Vancouver oracle, hand-built task records, and client wrappers that
//! record prompts or inject failures.
#![allow(dead_code, clippy::needless_range_loop, clippy::manual_clamp)]

use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use rxconsensus::backend::{
    Backends, CallError, CallPolicy, CompletionRequest, CompletionResult, ModelClient, Outcome,
    Parsed, RawReply, ResponseSchema, Script, ScriptDefault, ScriptEntry, ScriptedClient,
};
use rxconsensus::consensus::ConsensusResult;
use rxconsensus::domain::{
    EnsembleConfig, Grade, MedicationEntry, ModelId, Provider, Recommendation, Strategy,
};
use rxconsensus::pipeline::{
    response_label, Failure, GenerationRecord, GradeMatrix, Stage, TaskRecord, TaskStatus,
    WallClock, SCHEMA_VERSION,
};
use rxconsensus::sampling::Registry;

// ---------------------------------------------------------------------------
// Vancouver oracle
// ---------------------------------------------------------------------------

/// One grade: `(grader, item, grade, weight)`.
pub type OracleCell = (usize, usize, f64, f64);

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub quality: Vec<f64>,
    pub variance: Vec<f64>,
    pub iterations: u32,
    pub converged: bool,
}

/// Direct transcription of the fixed-point iteration with plain loops and
/// no shared code with the library:
///
/// * start from the unweighted item means and unit variances;
/// * each round, a grader's variance is the mean squared gap between its
///   grades and the leave-it-out weighted mean of each item (falling back to
///   the current item estimate when nobody else graded it), floored;
/// * then each item estimate is the `weight / variance`-weighted mean,
///   clamped to [0, 1], or the plain mean if all weights vanish;
/// * stop once no estimate moves by `eps` or more.
pub fn oracle_vancouver(
    graders: usize,
    items: usize,
    cells: &[OracleCell],
    max_iter: u32,
    eps: f64,
    floor: f64,
) -> OracleResult {
    let plain = |i: usize| {
        let gs: Vec<f64> = cells.iter().filter(|c| c.1 == i).map(|c| c.2).collect();
        gs.iter().sum::<f64>() / gs.len() as f64
    };
    let mut q: Vec<f64> = (0..items).map(plain).collect();
    let mut v = vec![1.0; graders];
    let mut it = 0;
    let mut converged = false;
    while it < max_iter {
        it += 1;
        let mut nv = vec![0.0; graders];
        for u in 0..graders {
            let mine: Vec<&OracleCell> = cells.iter().filter(|c| c.0 == u).collect();
            let mut total = 0.0;
            for c in &mine {
                let mut num = 0.0;
                let mut den = 0.0;
                for o in cells {
                    if o.1 == c.1 && o.0 != u {
                        num += o.3 * o.2 / v[o.0];
                        den += o.3 / v[o.0];
                    }
                }
                let loo = if den > 0.0 { num / den } else { q[c.1] };
                total += (c.2 - loo) * (c.2 - loo);
            }
            let var = total / mine.len() as f64;
            nv[u] = if var < floor { floor } else { var };
        }
        v = nv;
        let mut nq = vec![0.0; items];
        for (i, slot) in nq.iter_mut().enumerate() {
            let mut num = 0.0;
            let mut den = 0.0;
            for c in cells.iter().filter(|c| c.1 == i) {
                num += c.3 * c.2 / v[c.0];
                den += c.3 / v[c.0];
            }
            let est = if den > 0.0 { num / den } else { plain(i) };
            *slot = est.max(0.0).min(1.0);
        }
        let mut delta: f64 = 0.0;
        for i in 0..items {
            delta = delta.max((q[i] - nq[i]).abs());
        }
        q = nq;
        if delta < eps {
            converged = true;
            break;
        }
    }
    OracleResult {
        quality: q,
        variance: v,
        iterations: it,
        converged,
    }
}

/// Indexes a matrix for the oracle: graders with at least one cell, in name
/// order, and items in label order.
pub fn oracle_input(m: &GradeMatrix, self_weight: f64) -> (Vec<String>, Vec<String>, Vec<OracleCell>) {
    let mut graders: Vec<String> = m.cells().map(|c| c.grader).collect();
    graders.sort();
    graders.dedup();
    let items: Vec<String> = m.items().map(str::to_string).collect();
    let cells = m
        .cells()
        .map(|c| {
            let u = graders.iter().position(|g| *g == c.grader).unwrap();
            let i = items.iter().position(|x| *x == c.item).unwrap();
            let w = if c.grade.is_explicit() { 1.0 } else { self_weight };
            (u, i, c.grade.value(), w)
        })
        .collect();
    (graders, items, cells)
}

pub fn scripted(name: &str) -> ModelId {
    ModelId::new(Provider::Scripted, name).unwrap()
}

/// Registry identity when the name is a reference model, scripted otherwise.
pub fn model(name: &str) -> ModelId {
    Registry::reference()
        .get(name)
        .cloned()
        .unwrap_or_else(|| scripted(name))
}

/// Reviewers `g0..` grade items authored by an outside model, so every cell
/// is an explicit review. `None` leaves a cell empty.
pub fn reviewer_matrix(grades: &[Vec<Option<f64>>]) -> GradeMatrix {
    let n_items = grades.first().map_or(0, Vec::len);
    let mut graders: Vec<ModelId> = (0..grades.len()).map(|u| scripted(&format!("g{u}"))).collect();
    graders.push(scripted("author"));
    let items = (0..n_items).map(|i| (format!("item{i}"), "author".to_string()));
    let mut m = GradeMatrix::new(graders, items).unwrap();
    for (u, row) in grades.iter().enumerate() {
        for (i, g) in row.iter().enumerate() {
            if let Some(g) = g {
                m.insert(&format!("g{u}"), &format!("item{i}"), Grade::review(*g).unwrap())
                    .unwrap();
            }
        }
    }
    m
}

// ---------------------------------------------------------------------------
// Hand-built records
// ---------------------------------------------------------------------------

pub fn med(name: &str, dosage: &str, route: &str, frequency: &str, timing: &str, indication: &str) -> MedicationEntry {
    MedicationEntry {
        name: name.into(),
        dosage: dosage.into(),
        route: route.into(),
        frequency: frequency.into(),
        timing: timing.into(),
        indication: indication.into(),
    }
}

pub fn metformin_plan() -> Recommendation {
    Recommendation::new(
        vec![med("Metformin", "500 mg", "oral", "twice daily", "with meals", "type 2 diabetes")],
        Some("first-line therapy".into()),
    )
    .unwrap()
}

pub fn recommendation_json(rec: &Recommendation) -> String {
    serde_json::json!({"entries": rec.entries, "rationale": rec.rationale}).to_string()
}

/// Builds a [`TaskRecord`] directly, bypassing the pipeline, so metric and
/// chemistry fixtures can pin exact grades, latencies and qualities.
pub struct RecordBuilder {
    strategy: Strategy,
    trial: u32,
    note_id: String,
    gens: Vec<(ModelId, bool, u64, Recommendation)>,
    grades: Vec<(String, String, f64)>,
    selected: Option<(String, f64)>,
    implicit: bool,
}

impl RecordBuilder {
    pub fn new(strategy: Strategy, note_id: &str) -> Self {
        RecordBuilder {
            strategy,
            trial: 0,
            note_id: note_id.into(),
            gens: Vec::new(),
            grades: Vec::new(),
            selected: None,
            implicit: true,
        }
    }

    pub fn trial(mut self, trial: u32) -> Self {
        self.trial = trial;
        self
    }

    pub fn ok(self, model_name: &str, elapsed_ms: u64) -> Self {
        self.ok_with(model_name, elapsed_ms, metformin_plan())
    }

    pub fn ok_with(mut self, model_name: &str, elapsed_ms: u64, rec: Recommendation) -> Self {
        self.gens.push((model(model_name), true, elapsed_ms, rec));
        self
    }

    pub fn failed(mut self, model_name: &str, elapsed_ms: u64) -> Self {
        self.gens.push((model(model_name), false, elapsed_ms, metformin_plan()));
        self
    }

    /// Explicit review by `grader` of the response written by `author`.
    pub fn grade(mut self, grader: &str, author: &str, g: f64) -> Self {
        self.grades.push((grader.into(), author.into(), g));
        self
    }

    /// Marks `author`'s response as the answer with consensus `quality`.
    pub fn select(mut self, author: &str, quality: f64) -> Self {
        self.selected = Some((author.into(), quality));
        self
    }

    pub fn without_implicit(mut self) -> Self {
        self.implicit = false;
        self
    }

    pub fn build(self) -> TaskRecord {
        let members: Vec<ModelId> = self.gens.iter().map(|g| g.0.clone()).collect();
        let ensemble = EnsembleConfig::new(self.strategy, members.clone(), 0).unwrap();
        let mut labels: BTreeMap<String, String> = BTreeMap::new();
        let mut generations = Vec::new();
        let mut failures = Vec::new();
        for (m, ok, ms, rec) in &self.gens {
            let label = ok.then(|| response_label(labels.len()));
            if let Some(l) = &label {
                labels.insert(m.name().to_string(), l.clone());
            }
            generations.push(GenerationRecord {
                label,
                result: CompletionResult {
                    model: m.clone(),
                    raw_text: if *ok { recommendation_json(rec) } else { String::new() },
                    parsed: ok.then(|| Parsed::Recommendation(rec.clone())),
                    elapsed: Duration::from_millis(*ms),
                    outcome: if *ok { Outcome::Ok } else { Outcome::TransportFailed },
                    error: (!ok).then(|| "injected".to_string()),
                },
            });
            if !ok {
                failures.push(Failure {
                    stage: Stage::Generation,
                    model: m.name().to_string(),
                    item: None,
                    outcome: Outcome::TransportFailed,
                    error: Some("injected".into()),
                });
            }
        }
        let mut matrix = GradeMatrix::new(
            members,
            labels.iter().map(|(author, label)| (label.clone(), author.clone())),
        )
        .unwrap();
        for (grader, author, g) in &self.grades {
            matrix
                .insert(grader, &labels[author], Grade::review(*g).unwrap())
                .unwrap();
        }
        if self.implicit {
            for (author, label) in &labels {
                matrix.insert(author, label, Grade::implicit_self()).unwrap();
            }
        }
        let (selected, consensus) = match &self.selected {
            Some((author, quality)) => {
                let label = labels[author].clone();
                let rec = self
                    .gens
                    .iter()
                    .find(|g| g.0.name() == author)
                    .map(|g| g.3.clone())
                    .unwrap();
                (
                    Some(rxconsensus::pipeline::SelectedAnswer {
                        label: label.clone(),
                        model: author.clone(),
                        recommendation: rec,
                    }),
                    Some(ConsensusResult {
                        consensus_grade: [(label, *quality)].into(),
                        grader_variance: BTreeMap::new(),
                        iterations_used: 1,
                        converged: true,
                    }),
                )
            }
            None => (None, None),
        };
        TaskRecord {
            schema_version: SCHEMA_VERSION,
            strategy: self.strategy,
            trial: self.trial,
            note_id: self.note_id,
            ensemble,
            task_seed: 0,
            status: if labels.is_empty() {
                TaskStatus::AllGenerationsFailed
            } else {
                TaskStatus::Completed
            },
            generations,
            reviews: Vec::new(),
            grades: matrix,
            consensus,
            selected,
            failures,
            timing: WallClock {
                started_at: "2025-01-01T00:00:00.000Z".into(),
                finished_at: "2025-01-01T00:00:01.000Z".into(),
                generation_ms: 0,
                evaluation_ms: 0,
            },
            extra: BTreeMap::new(),
        }
    }
}

// ---------------------------------------------------------------------------
// Clients
// ---------------------------------------------------------------------------

/// Every model answers with `plan` and grades every review `grade`.
pub fn uniform_script(plan: &Recommendation, grade: f64, elapsed_ms: u64) -> Script {
    Script::from_entries(
        ScriptDefault::Error,
        [
            ScriptEntry::reply("*", recommendation_json(plan), elapsed_ms)
                .for_schema(ResponseSchema::Recommendation),
            ScriptEntry::reply("*", format!(r#"{{"grade": {grade}, "critique": "reasonable"}}"#), elapsed_ms / 4)
                .for_schema(ResponseSchema::Review),
        ],
    )
    .unwrap()
}

pub fn scripted_backends<'a>(models: impl IntoIterator<Item = &'a ModelId>, script: Script) -> Backends {
    let script = Arc::new(script);
    let mut b = Backends::new(CallPolicy::default());
    for m in models {
        b.insert(m.name(), Arc::new(ScriptedClient::new(script.clone())));
    }
    b
}

#[derive(Debug, Clone)]
pub struct SeenRequest {
    pub model: String,
    pub schema: ResponseSchema,
    pub system_prompt: String,
    pub user_prompt: String,
}

/// Passes calls through and keeps a copy of every request.
pub struct RecordingClient {
    inner: Arc<dyn ModelClient>,
    pub seen: Arc<Mutex<Vec<SeenRequest>>>,
}

impl RecordingClient {
    pub fn new(inner: Arc<dyn ModelClient>, seen: Arc<Mutex<Vec<SeenRequest>>>) -> Self {
        RecordingClient { inner, seen }
    }
}

#[async_trait]
impl ModelClient for RecordingClient {
    async fn call(&self, req: &CompletionRequest) -> Result<RawReply, CallError> {
        self.seen.lock().unwrap().push(SeenRequest {
            model: req.model.name().to_string(),
            schema: req.response_schema,
            system_prompt: req.system_prompt.clone(),
            user_prompt: req.user_prompt.clone(),
        });
        self.inner.call(req).await
    }
}

/// Fails a call with probability `p`, decided by hashing the seed, model
/// and full prompt, so replays fail identically.
pub struct FlakyClient {
    inner: Arc<dyn ModelClient>,
    p: f64,
    seed: u64,
    only: Option<ResponseSchema>,
}

impl FlakyClient {
    pub fn new(inner: Arc<dyn ModelClient>, p: f64, seed: u64) -> Self {
        FlakyClient {
            inner,
            p,
            seed,
            only: None,
        }
    }

    /// Restricts fault injection to one kind of call.
    pub fn only(mut self, schema: ResponseSchema) -> Self {
        self.only = Some(schema);
        self
    }
}

#[async_trait]
impl ModelClient for FlakyClient {
    async fn call(&self, req: &CompletionRequest) -> Result<RawReply, CallError> {
        let mut h = DefaultHasher::new();
        (self.seed, req.model.name(), req.response_schema.as_str(), &req.user_prompt).hash(&mut h);
        let u = (h.finish() >> 11) as f64 / (1u64 << 53) as f64;
        if u < self.p && self.only.is_none_or(|s| s == req.response_schema) {
            return Err(CallError::Transport {
                message: "injected fault".into(),
                elapsed: Some(Duration::from_millis(5)),
            });
        }
        self.inner.call(req).await
    }
}
