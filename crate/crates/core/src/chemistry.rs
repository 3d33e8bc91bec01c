//! Ensemble recommendation from historical run logs.
//!
//! This is a surrogate scorer, not the original Chemistry formulation. Each
//! candidate subset gets `α·quality − β·disagreement − γ·latency_penalty`
//! computed from explicit peer-review grades (implicit self-grades are
//! ignored), and every subset of the eligible models is enumerated.

use std::collections::BTreeMap;

use itertools::Itertools;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::ModelId;
use crate::pipeline::TaskRecord;

pub const DEFAULT_MIN_OBSERVATIONS: usize = 3;

/// Shown in every report so readers know what "quality" means here.
pub const GRADE_SOURCE: &str =
    "surrogate score from explicit peer-review grades; implicit self-grades and consensus weights are not used";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChemistryError {
    #[error("no task records to learn from")]
    NoRecords,
    #[error("no model has at least {min_obs} graded responses")]
    NoEligibleModels { min_obs: usize },
    #[error("need {needed} eligible models, only {eligible} available")]
    TooFewEligible { needed: usize, eligible: usize },
    #[error("ensemble size must be positive")]
    ZeroSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub model: ModelId,
    /// Mean over responses of the mean explicit grade each received.
    pub mean_received_grade: f64,
    /// Population variance of the per-response mean grades.
    pub grade_variance_across_tasks: f64,
    pub mean_elapsed_ms: f64,
    pub failure_rate: f64,
    /// Responses that received at least one explicit grade.
    pub observations: usize,
    pub attempts: usize,
    pub eligible: bool,
}

/// Order-independent sum: sorting first makes the float result identical
/// for any permutation of the inputs.
fn stable_mean(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Default)]
struct Tally {
    model: Option<ModelId>,
    attempts: usize,
    failures: usize,
    elapsed_ms: u64,
    response_means: Vec<f64>,
}

/// Per-model statistics across all records. Models with fewer than
/// `min_obs` graded responses are reported but marked ineligible.
pub fn build_profiles(
    records: &[TaskRecord],
    min_obs: usize,
) -> Result<BTreeMap<String, ModelProfile>, ChemistryError> {
    if records.is_empty() {
        return Err(ChemistryError::NoRecords);
    }
    let mut tallies: BTreeMap<String, Tally> = BTreeMap::new();
    for r in records {
        for g in &r.generations {
            let t = tallies.entry(g.result.model.name().to_string()).or_default();
            t.model.get_or_insert_with(|| g.result.model.clone());
            t.attempts += 1;
            t.elapsed_ms += g.result.elapsed.as_millis() as u64;
            if !g.result.is_ok() {
                t.failures += 1;
            }
        }
        for item in r.grades.items() {
            let grades = r.grades.explicit_grades_on(item);
            if grades.is_empty() {
                continue;
            }
            let author = r.grades.author_of(item).expect("items have authors");
            if let Some(t) = tallies.get_mut(author) {
                t.response_means.push(stable_mean(grades));
            }
        }
    }
    let profiles: BTreeMap<String, ModelProfile> = tallies
        .into_iter()
        .filter_map(|(name, t)| {
            let model = t.model?;
            let observations = t.response_means.len();
            let m = stable_mean(t.response_means.clone());
            let var = stable_mean(t.response_means.iter().map(|x| (x - m).powi(2)).collect());
            Some((
                name,
                ModelProfile {
                    model,
                    mean_received_grade: m,
                    grade_variance_across_tasks: var,
                    mean_elapsed_ms: t.elapsed_ms as f64 / t.attempts as f64,
                    failure_rate: t.failures as f64 / t.attempts as f64,
                    observations,
                    attempts: t.attempts,
                    eligible: observations >= min_obs.max(1),
                },
            ))
        })
        .collect();
    if !profiles.values().any(|p| p.eligible) {
        return Err(ChemistryError::NoEligibleModels { min_obs });
    }
    Ok(profiles)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairAgreement {
    pub a: String,
    pub b: String,
    pub mean_squared_difference: f64,
    pub shared_items: usize,
}

/// Symmetric pairwise disagreement between graders. Pairs that never graded
/// a common item are absent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AgreementMatrix {
    pairs: BTreeMap<(String, String), (f64, usize)>,
}

fn ordered(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl AgreementMatrix {
    /// Mean squared grade difference; `Some(0.0)` on the diagonal.
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        if a == b {
            return Some(0.0);
        }
        self.pairs.get(&ordered(a, b)).map(|(v, _)| *v)
    }

    pub fn shared_items(&self, a: &str, b: &str) -> usize {
        self.pairs.get(&ordered(a, b)).map_or(0, |(_, n)| *n)
    }

    /// Unweighted mean over all recorded pairs, 0 when there are none.
    pub fn global_mean(&self) -> f64 {
        stable_mean(self.pairs.values().map(|(v, _)| *v).collect())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> Vec<PairAgreement> {
        self.pairs
            .iter()
            .map(|((a, b), (v, n))| PairAgreement {
                a: a.clone(),
                b: b.clone(),
                mean_squared_difference: *v,
                shared_items: *n,
            })
            .collect()
    }
}

pub fn build_agreement(records: &[TaskRecord]) -> AgreementMatrix {
    let mut diffs: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in records {
        for item in r.grades.items() {
            let graded: Vec<(String, f64)> = r
                .grades
                .cells()
                .filter(|c| c.item == item && c.grade.is_explicit())
                .map(|c| (c.grader, c.grade.value()))
                .collect();
            for ((a, ga), (b, gb)) in graded.iter().tuple_combinations() {
                diffs.entry(ordered(a, b)).or_default().push((ga - gb).powi(2));
            }
        }
    }
    AgreementMatrix {
        pairs: diffs
            .into_iter()
            .map(|(k, v)| {
                let n = v.len();
                (k, (stable_mean(v), n))
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Weights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Components {
    pub quality: f64,
    pub disagreement: f64,
    pub latency_penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChemistryScore {
    /// Sorted by name.
    pub members: Vec<ModelId>,
    pub score: f64,
    pub components: Components,
    pub weights: Weights,
    /// Member pairs with no shared history, scored at the global mean.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub missing_pairs: Vec<(String, String)>,
}

impl ChemistryScore {
    /// A bare hint naming an ensemble, e.g. one read back from a report.
    pub fn for_members(members: Vec<ModelId>) -> Self {
        ChemistryScore {
            members,
            score: 0.0,
            components: Components::default(),
            weights: Weights::default(),
            missing_pairs: Vec::new(),
        }
    }

    pub fn member_names(&self) -> Vec<&str> {
        self.members.iter().map(ModelId::name).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRecommendation {
    pub best: ChemistryScore,
    /// Every eligible subset, best first.
    pub ranked: Vec<ChemistryScore>,
}

/// Score one subset; `members` must be eligible profiles.
pub fn score_subset(
    members: &[&ModelProfile],
    agreement: &AgreementMatrix,
    max_elapsed_ms: f64,
    weights: Weights,
) -> ChemistryScore {
    let k = members.len() as f64;
    let quality = members.iter().map(|p| p.mean_received_grade).sum::<f64>() / k;
    let global = agreement.global_mean();
    let mut missing = Vec::new();
    let mut pair_values = Vec::new();
    for (a, b) in members.iter().tuple_combinations() {
        match agreement.get(a.model.name(), b.model.name()) {
            Some(v) => pair_values.push(v),
            None => {
                missing.push(ordered(a.model.name(), b.model.name()));
                pair_values.push(global);
            }
        }
    }
    let disagreement = if pair_values.is_empty() {
        0.0
    } else {
        pair_values.iter().sum::<f64>() / pair_values.len() as f64
    };
    let mean_elapsed = members.iter().map(|p| p.mean_elapsed_ms).sum::<f64>() / k;
    let latency_penalty = if max_elapsed_ms > 0.0 {
        mean_elapsed / max_elapsed_ms
    } else {
        0.0
    };
    ChemistryScore {
        members: members.iter().map(|p| p.model.clone()).collect(),
        score: weights.alpha * quality - weights.beta * disagreement - weights.gamma * latency_penalty,
        components: Components {
            quality,
            disagreement,
            latency_penalty,
        },
        weights,
        missing_pairs: missing,
    }
}

/// Exhaustive search over all `C(eligible, n)` subsets. Ties go to the
/// lexicographically smaller sorted member list.
pub fn recommend_ensemble(
    profiles: &BTreeMap<String, ModelProfile>,
    agreement: &AgreementMatrix,
    n: usize,
    weights: Weights,
) -> Result<EnsembleRecommendation, ChemistryError> {
    if n == 0 {
        return Err(ChemistryError::ZeroSize);
    }
    // BTreeMap iteration is name-sorted, so every subset is too.
    let eligible: Vec<&ModelProfile> = profiles.values().filter(|p| p.eligible).collect();
    if eligible.len() < n {
        return Err(ChemistryError::TooFewEligible {
            needed: n,
            eligible: eligible.len(),
        });
    }
    let max_elapsed = eligible
        .iter()
        .map(|p| p.mean_elapsed_ms)
        .fold(0.0, f64::max);
    let mut ranked: Vec<ChemistryScore> = eligible
        .iter()
        .copied()
        .combinations(n)
        .map(|subset| score_subset(&subset, agreement, max_elapsed, weights))
        .collect();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.member_names().cmp(&b.member_names()))
    });
    Ok(EnsembleRecommendation {
        best: ranked[0].clone(),
        ranked,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub members: Vec<String>,
    pub score: f64,
    pub components: Components,
}

/// Report written by the `recommend` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChemistryReport {
    pub members: Vec<String>,
    pub score: f64,
    pub components: Components,
    pub weights: Weights,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub missing_pairs: Vec<(String, String)>,
    pub ranked_top_k: Vec<RankedEntry>,
    pub subsets_evaluated: usize,
    pub grade_source: String,
}

impl ChemistryReport {
    pub fn new(rec: &EnsembleRecommendation, top_k: usize) -> Self {
        let names = |s: &ChemistryScore| s.member_names().into_iter().map(String::from).collect();
        ChemistryReport {
            members: names(&rec.best),
            score: rec.best.score,
            components: rec.best.components,
            weights: rec.best.weights,
            missing_pairs: rec.best.missing_pairs.clone(),
            ranked_top_k: rec
                .ranked
                .iter()
                .take(top_k)
                .map(|s| RankedEntry {
                    members: names(s),
                    score: s.score,
                    components: s.components,
                })
                .collect(),
            subsets_evaluated: rec.ranked.len(),
            grade_source: GRADE_SOURCE.to_string(),
        }
    }
}
