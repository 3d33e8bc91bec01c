//! Efficiency, effectiveness, stability and calibration of run logs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{GroundTruth, Strategy};
use crate::pipeline::{TaskRecord, TaskStatus};
use crate::scoring::{Scorer, ScoringError};

/// Record key set by runs whose tasks executed concurrently.
pub const PARALLEL_TASKS_KEY: &str = "parallel_tasks";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no generation attempts to measure")]
    NoData,
    #[error("no ground truth for note {0:?}")]
    MissingGroundTruth(String),
    #[error("stability needs at least 2 tasks, got {0}")]
    TooFewTasks(usize),
    #[error("no response received two or more explicit grades")]
    NoMultiplyGradedResponses,
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

/// "H hours, M minutes and S seconds" with zero leading units dropped.
/// Seconds are rounded to the nearest integer before splitting.
pub fn format_duration(d: Duration) -> String {
    let total = d.as_secs_f64().round() as u64;
    let (h, m, s) = (total / 3600, (total % 3600) / 60, total % 60);
    let unit = |v: u64, name: &str| {
        if v == 1 {
            format!("1 {name}")
        } else {
            format!("{v} {name}s")
        }
    };
    let secs = unit(s, "second");
    if h > 0 {
        format!("{}, {} and {secs}", unit(h, "hour"), unit(m, "minute"))
    } else if m > 0 {
        format!("{} and {secs}", unit(m, "minute"))
    } else {
        secs
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

pub fn population_variance(values: &[f64]) -> Option<f64> {
    let m = mean(values)?;
    Some(values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64)
}

pub fn sample_std(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let m = mean(values)?;
    let ss: f64 = values.iter().map(|v| (v - m).powi(2)).sum();
    Some((ss / (values.len() - 1) as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEfficiency {
    pub attempts: usize,
    pub mean_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Efficiency {
    pub attempts: usize,
    pub total_ms: u64,
    pub mean_ms: f64,
    pub per_model: BTreeMap<String, ModelEfficiency>,
}

impl Efficiency {
    pub fn mean(&self) -> Duration {
        Duration::from_secs_f64(self.mean_ms / 1000.0)
    }
}

/// Mean generation latency over every attempt, failed ones included.
pub fn efficiency(records: &[TaskRecord]) -> Result<Efficiency, MetricsError> {
    let mut per_model: BTreeMap<String, (usize, u64)> = BTreeMap::new();
    let mut attempts = 0usize;
    let mut total_ms = 0u64;
    for g in records.iter().flat_map(|r| &r.generations) {
        let ms = g.result.elapsed.as_millis() as u64;
        attempts += 1;
        total_ms += ms;
        let slot = per_model.entry(g.result.model.name().to_string()).or_default();
        slot.0 += 1;
        slot.1 += ms;
    }
    if attempts == 0 {
        return Err(MetricsError::NoData);
    }
    Ok(Efficiency {
        attempts,
        total_ms,
        mean_ms: total_ms as f64 / attempts as f64,
        per_model: per_model
            .into_iter()
            .map(|(m, (n, t))| {
                (
                    m,
                    ModelEfficiency {
                        attempts: n,
                        mean_ms: t as f64 / n as f64,
                    },
                )
            })
            .collect(),
    })
}

/// F1 of the selected answer against ground truth; 0 when nothing was selected.
pub fn task_f1(record: &TaskRecord, truth: &GroundTruth, scorer: &Scorer) -> Result<f64, MetricsError> {
    let expected = truth
        .get(&record.note_id)
        .ok_or_else(|| MetricsError::MissingGroundTruth(record.note_id.clone()))?;
    match &record.selected {
        Some(sel) => Ok(scorer.score(&sel.recommendation, expected)?.f1),
        None => Ok(0.0),
    }
}

/// Mean F1-accuracy over tasks.
pub fn effectiveness(records: &[TaskRecord], truth: &GroundTruth) -> Result<f64, MetricsError> {
    effectiveness_with(records, truth, &Scorer::default())
}

pub fn effectiveness_with(
    records: &[TaskRecord],
    truth: &GroundTruth,
    scorer: &Scorer,
) -> Result<f64, MetricsError> {
    let scores = records
        .iter()
        .map(|r| task_f1(r, truth, scorer))
        .collect::<Result<Vec<_>, _>>()?;
    mean(&scores).ok_or(MetricsError::NoData)
}

/// `1 - sample std` of per-task qualities, floored at 0.
pub fn stability_of(qualities: &[f64]) -> Result<f64, MetricsError> {
    let sd = sample_std(qualities).ok_or(MetricsError::TooFewTasks(qualities.len()))?;
    Ok((1.0 - sd).max(0.0))
}

pub fn stability(records: &[TaskRecord]) -> Result<f64, MetricsError> {
    let q: Vec<f64> = records.iter().map(TaskRecord::selected_quality).collect();
    stability_of(&q)
}

/// Population variance of explicit grades for every response graded at
/// least twice in one task.
pub fn response_variances(record: &TaskRecord) -> Vec<f64> {
    record
        .grades
        .items()
        .map(|item| record.grades.explicit_grades_on(item))
        .filter(|g| g.len() >= 2)
        .filter_map(|g| population_variance(&g))
        .collect()
}

/// Mean per-response grade variance across all tasks. Lower is better.
pub fn calibration(records: &[TaskRecord]) -> Result<f64, MetricsError> {
    let all: Vec<f64> = records.iter().flat_map(response_variances).collect();
    mean(&all).ok_or(MetricsError::NoMultiplyGradedResponses)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub strategy: Strategy,
    pub trial: u32,
    pub note_id: String,
    pub members: String,
    pub status: TaskStatus,
    pub answers: usize,
    pub failures: usize,
    pub mean_generation_ms: Option<f64>,
    pub quality: f64,
    pub f1: Option<f64>,
    pub grade_variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: Strategy,
    pub trials: usize,
    pub tasks: usize,
    pub answers: usize,
    /// Failed generation attempts.
    pub failures: usize,
    /// Tasks where every generation failed.
    pub failed_tasks: usize,
    pub mean_elapsed_ms: Option<f64>,
    pub efficiency: Option<String>,
    pub per_model_elapsed_ms: BTreeMap<String, f64>,
    pub effectiveness: Option<f64>,
    pub stability: Option<f64>,
    pub calibration: Option<f64>,
    pub parallel_tasks: bool,
    pub per_task: Vec<TaskRow>,
}

fn task_row(r: &TaskRecord, f1: Option<f64>) -> TaskRow {
    let gen_ms: Vec<f64> = r
        .generations
        .iter()
        .map(|g| g.result.elapsed.as_millis() as f64)
        .collect();
    let variances = response_variances(r);
    TaskRow {
        strategy: r.strategy,
        trial: r.trial,
        note_id: r.note_id.clone(),
        members: r
            .ensemble
            .members()
            .iter()
            .map(|m| m.name())
            .collect::<Vec<_>>()
            .join(";"),
        status: r.status,
        answers: r.ok_responses(),
        failures: r.generation_failures(),
        mean_generation_ms: mean(&gen_ms),
        quality: r.selected_quality(),
        f1,
        grade_variance: mean(&variances),
    }
}

/// One report per strategy present in `records`, in canonical strategy
/// order. Effectiveness is computed only when ground truth is supplied.
pub fn build_reports(
    records: &[TaskRecord],
    truth: Option<&GroundTruth>,
    scorer: &Scorer,
) -> Result<Vec<StrategyReport>, MetricsError> {
    let mut out = Vec::new();
    for strategy in Strategy::ALL {
        let group: Vec<TaskRecord> = records
            .iter()
            .filter(|r| r.strategy == strategy)
            .cloned()
            .collect();
        if group.is_empty() {
            continue;
        }
        let f1s = match truth {
            Some(t) => Some(
                group
                    .iter()
                    .map(|r| task_f1(r, t, scorer))
                    .collect::<Result<Vec<_>, _>>()?,
            ),
            None => None,
        };
        let eff = efficiency(&group).ok();
        out.push(StrategyReport {
            strategy,
            trials: group.iter().map(|r| r.trial).collect::<BTreeSet<_>>().len(),
            tasks: group.len(),
            answers: group.iter().map(TaskRecord::ok_responses).sum(),
            failures: group.iter().map(TaskRecord::generation_failures).sum(),
            failed_tasks: group
                .iter()
                .filter(|r| r.status == TaskStatus::AllGenerationsFailed)
                .count(),
            mean_elapsed_ms: eff.as_ref().map(|e| e.mean_ms),
            efficiency: eff.as_ref().map(|e| format_duration(e.mean())),
            per_model_elapsed_ms: eff
                .map(|e| e.per_model.into_iter().map(|(m, v)| (m, v.mean_ms)).collect())
                .unwrap_or_default(),
            effectiveness: f1s.as_deref().and_then(mean),
            stability: stability(&group).ok(),
            calibration: calibration(&group).ok(),
            parallel_tasks: group
                .iter()
                .any(|r| r.extra.get(PARALLEL_TASKS_KEY) == Some(&serde_json::Value::Bool(true))),
            per_task: group
                .iter()
                .enumerate()
                .map(|(i, r)| task_row(r, f1s.as_ref().map(|f| f[i])))
                .collect(),
        });
    }
    Ok(out)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into())
}

/// Aligned text table, one row per strategy.
pub fn render_text(reports: &[StrategyReport]) -> String {
    let header = [
        "strategy",
        "answers",
        "failures",
        "efficiency",
        "effectiveness",
        "stability",
        "calibration",
    ];
    let rows: Vec<[String; 7]> = reports
        .iter()
        .map(|r| {
            [
                r.strategy.to_string(),
                r.answers.to_string(),
                r.failures.to_string(),
                r.efficiency.clone().unwrap_or_else(|| "-".into()),
                cell(r.effectiveness),
                cell(r.stability),
                cell(r.calibration),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let mut line = |cells: Vec<&str>| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        let _ = writeln!(out, "{}", parts.join(" | ").trim_end());
    };
    line(header.to_vec());
    line(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect());
    for r in &rows {
        line(r.iter().map(String::as_str).collect());
    }
    if reports.iter().any(|r| r.parallel_tasks) {
        out.push_str("\nnote: some tasks ran concurrently; per-task timings may overlap.\n");
    }
    out
}

pub fn render_json(reports: &[StrategyReport]) -> String {
    serde_json::to_string_pretty(reports).expect("reports serialize")
}

/// Per-task rows of every report as CSV.
pub fn render_csv(reports: &[StrategyReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in reports.iter().flat_map(|r| &r.per_task) {
        w.serialize(row).expect("row serializes");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn duration_examples() {
        assert_eq!(format_duration(Duration::from_secs(217)), "3 minutes and 37 seconds");
        assert_eq!(format_duration(Duration::from_secs(11)), "11 seconds");
        assert_eq!(format_duration(Duration::ZERO), "0 seconds");
        assert_eq!(format_duration(Duration::from_secs(1)), "1 second");
        assert_eq!(format_duration(Duration::from_millis(10_600)), "11 seconds");
        assert_eq!(format_duration(Duration::from_millis(59_500)), "1 minute and 0 seconds");
        assert_eq!(
            format_duration(Duration::from_secs(3600 + 61)),
            "1 hour, 1 minute and 1 second"
        );
        assert_eq!(
            format_duration(Duration::from_secs(2 * 3600 + 5)),
            "2 hours, 0 minutes and 5 seconds"
        );
    }

    #[test]
    fn variance_and_stability_examples() {
        let v = population_variance(&[0.9, 0.8, 1.0]).unwrap();
        assert!((v - 0.02 / 3.0).abs() < 1e-12);
        assert!((stability_of(&[1.0, 0.0]).unwrap() - (1.0 - 0.5f64.sqrt())).abs() < 1e-12);
        assert_eq!(stability_of(&[0.7; 5]).unwrap(), 1.0);
        assert!(matches!(stability_of(&[0.5]), Err(MetricsError::TooFewTasks(1))));
        let mut q = vec![0.9; 9];
        q.push(0.0);
        assert!(stability_of(&q).unwrap() < stability_of(&[0.9; 10]).unwrap());
    }

    #[test]
    fn efficiency_of_empty_is_no_data() {
        assert!(matches!(efficiency(&[]), Err(MetricsError::NoData)));
        assert!(matches!(calibration(&[]), Err(MetricsError::NoMultiplyGradedResponses)));
    }

    proptest! {
        #[test]
        fn stability_is_bounded(q in prop::collection::vec(0.0f64..=1.0, 2..20)) {
            let s = stability_of(&q).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
        }

        #[test]
        fn population_variance_is_permutation_free(mut v in prop::collection::vec(0.0f64..=1.0, 1..8)) {
            let a = population_variance(&v).unwrap();
            v.reverse();
            let b = population_variance(&v).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a >= 0.0);
        }
    }
}
