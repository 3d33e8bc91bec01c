//! Reputation-weighted consensus over a [`GradeMatrix`].
//!
//! Each grader's reliability is the inverse of its estimated variance, where
//! the variance is the mean squared distance between the grader's grades and
//! the leave-one-out consensus of the other graders on the same items. Item
//! consensus is the precision-weighted mean of its grades. The two estimates
//! are iterated to a fixed point.
//!
//! Update order within one iteration is Jacobi style: every variance is
//! computed from the previous iteration's variances and consensus, then every
//! item consensus from the new variances. The first iteration starts from
//! equal variances and the unweighted item means.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::GradeKind;
use crate::pipeline::GradeMatrix;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConsensusError {
    #[error("grade matrix has no cells")]
    EmptyMatrix,
    #[error("item {0:?} has no grades")]
    IsolatedItem(String),
    #[error("invalid consensus parameters: {0}")]
    InvalidParams(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VancouverParams {
    pub max_iterations: u32,
    /// Convergence threshold on the largest per-item consensus change.
    pub epsilon: f64,
    pub variance_floor: f64,
    /// Weight of implicit self-grades relative to explicit reviews.
    pub self_grade_weight: f64,
}

impl Default for VancouverParams {
    fn default() -> Self {
        VancouverParams {
            max_iterations: 50,
            epsilon: 1e-6,
            variance_floor: 1e-4,
            self_grade_weight: 1.0,
        }
    }
}

impl VancouverParams {
    fn check(&self) -> Result<(), ConsensusError> {
        if self.max_iterations == 0 {
            return Err(ConsensusError::InvalidParams("max_iterations must be positive"));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(ConsensusError::InvalidParams("epsilon must be positive"));
        }
        if self.variance_floor.is_nan() || self.variance_floor <= 0.0 {
            return Err(ConsensusError::InvalidParams("variance_floor must be positive"));
        }
        if !(0.0..=1.0).contains(&self.self_grade_weight) {
            return Err(ConsensusError::InvalidParams("self_grade_weight must be in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusResult {
    pub consensus_grade: BTreeMap<String, f64>,
    pub grader_variance: BTreeMap<String, f64>,
    pub iterations_used: u32,
    pub converged: bool,
}

/// Dense view of the matrix: graders and items as indices.
struct Dense {
    graders: Vec<String>,
    items: Vec<String>,
    /// (grader, item, grade, weight)
    cells: Vec<(usize, usize, f64, f64)>,
    by_item: Vec<Vec<usize>>,
    by_grader: Vec<Vec<usize>>,
}

impl Dense {
    fn build(matrix: &GradeMatrix, self_weight: f64) -> Result<Dense, ConsensusError> {
        if matrix.is_empty() {
            return Err(ConsensusError::EmptyMatrix);
        }
        let items: Vec<String> = matrix.items().map(str::to_string).collect();
        let item_ix: BTreeMap<&str, usize> = items
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        // Graders without any cell take no part in the estimate.
        let graders: Vec<String> = matrix
            .graders()
            .iter()
            .map(|g| g.name().to_string())
            .filter(|g| matrix.cells().any(|c| &c.grader == g))
            .collect();
        let grader_ix: BTreeMap<&str, usize> = graders
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();

        let mut cells = Vec::with_capacity(matrix.len());
        let mut by_item = vec![Vec::new(); items.len()];
        let mut by_grader = vec![Vec::new(); graders.len()];
        for c in matrix.cells() {
            let u = grader_ix[c.grader.as_str()];
            let i = item_ix[c.item.as_str()];
            let w = match c.grade.kind() {
                GradeKind::ImplicitSelf => self_weight,
                GradeKind::ExplicitReview => 1.0,
            };
            by_item[i].push(cells.len());
            by_grader[u].push(cells.len());
            cells.push((u, i, c.grade.value(), w));
        }
        if let Some(i) = by_item.iter().position(Vec::is_empty) {
            return Err(ConsensusError::IsolatedItem(items[i].clone()));
        }
        Ok(Dense {
            graders,
            items,
            cells,
            by_item,
            by_grader,
        })
    }

    /// Precision-weighted mean of item `i`, optionally excluding one grader.
    /// `None` when no positively weighted grade remains.
    fn weighted_mean(&self, i: usize, excluded: Option<usize>, variance: &[f64]) -> Option<f64> {
        precision_mean(self.by_item[i].iter().filter_map(|&c| {
            let (u, _, g, w) = self.cells[c];
            (Some(u) != excluded).then(|| (g, w / variance[u]))
        }))
    }

    fn plain_mean(&self, i: usize) -> f64 {
        let grades = &self.by_item[i];
        grades.iter().map(|&c| self.cells[c].2).sum::<f64>() / grades.len() as f64
    }
}

/// `Σ p·g / Σ p` over `(g, p)` pairs, computed as an offset from the first
/// grade so that a single grade, or identical grades, come back exactly.
/// `None` when the total weight is not positive.
fn precision_mean(cells: impl Iterator<Item = (f64, f64)>) -> Option<f64> {
    let mut anchor = None;
    let (mut num, mut den) = (0.0, 0.0);
    for (g, p) in cells {
        let a = *anchor.get_or_insert(g);
        num += p * (g - a);
        den += p;
    }
    let a = anchor?;
    (den > 0.0).then(|| a + num / den)
}

/// Precision-weighted mean of `item`'s grades excluding `excluded_grader`.
///
/// Graders missing from `variances` count with variance 1. Returns `None`
/// when no other grader (with positive weight) graded the item; the caller
/// then falls back to the full consensus.
pub fn leave_one_out(
    matrix: &GradeMatrix,
    item: &str,
    excluded_grader: &str,
    variances: &BTreeMap<String, f64>,
    params: &VancouverParams,
) -> Option<f64> {
    precision_mean(
        matrix
            .cells()
            .filter(|c| c.item == item && c.grader != excluded_grader)
            .map(|c| {
                let v = variances.get(&c.grader).copied().unwrap_or(1.0);
                let w = if c.grade.is_explicit() {
                    1.0
                } else {
                    params.self_grade_weight
                };
                (c.grade.value(), w / v)
            }),
    )
}

pub fn vancouver(
    matrix: &GradeMatrix,
    params: &VancouverParams,
) -> Result<ConsensusResult, ConsensusError> {
    params.check()?;
    let d = Dense::build(matrix, params.self_grade_weight)?;

    let mut quality: Vec<f64> = (0..d.items.len()).map(|i| d.plain_mean(i)).collect();
    let mut variance = vec![1.0; d.graders.len()];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < params.max_iterations {
        iterations += 1;

        let next_variance: Vec<f64> = (0..d.graders.len())
            .map(|u| {
                let own = &d.by_grader[u];
                let sq: f64 = own
                    .iter()
                    .map(|&c| {
                        let (_, i, g, _) = d.cells[c];
                        let reference = d.weighted_mean(i, Some(u), &variance).unwrap_or(quality[i]);
                        (g - reference).powi(2)
                    })
                    .sum();
                (sq / own.len() as f64).max(params.variance_floor)
            })
            .collect();
        variance = next_variance;

        let next_quality: Vec<f64> = (0..d.items.len())
            .map(|i| {
                d.weighted_mean(i, None, &variance)
                    .unwrap_or_else(|| d.plain_mean(i))
                    .clamp(0.0, 1.0)
            })
            .collect();
        let delta = quality
            .iter()
            .zip(&next_quality)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        quality = next_quality;
        if delta < params.epsilon {
            converged = true;
            break;
        }
    }

    Ok(ConsensusResult {
        consensus_grade: d.items.iter().cloned().zip(quality).collect(),
        grader_variance: d.graders.iter().cloned().zip(variance).collect(),
        iterations_used: iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Grade, ModelId, Provider};

    fn model(n: &str) -> ModelId {
        ModelId::new(Provider::Scripted, n).unwrap()
    }

    /// Reviewer-only matrix: graders g0..gk grade items authored by an
    /// outside model, so no self-review constraint applies.
    fn reviewer_matrix(grades: &[&[Option<f64>]]) -> GradeMatrix {
        let n_items = grades[0].len();
        let mut graders: Vec<ModelId> = (0..grades.len()).map(|u| model(&format!("g{u}"))).collect();
        graders.push(model("author"));
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

    #[test]
    fn unanimity_is_an_immediate_fixed_point() {
        let s = Some(0.8);
        let m = reviewer_matrix(&[&[s, s], &[s, s], &[s, s]]);
        let p = VancouverParams::default();
        let r = vancouver(&m, &p).unwrap();
        assert!(r.converged);
        assert!(r.iterations_used <= 2);
        assert!(r.consensus_grade.values().all(|&q| q == 0.8));
        assert!(r.grader_variance.values().all(|&v| v == p.variance_floor));
    }

    #[test]
    fn single_cell() {
        let m = reviewer_matrix(&[&[Some(0.6)]]);
        let r = vancouver(&m, &VancouverParams::default()).unwrap();
        assert_eq!(r.consensus_grade["item0"], 0.6);
    }

    #[test]
    fn noisy_grader_is_discounted() {
        let m = reviewer_matrix(&[
            &[Some(0.9), Some(0.5)],
            &[Some(0.9), Some(0.5)],
            &[Some(0.1), Some(1.0)],
        ]);
        let r = vancouver(&m, &VancouverParams::default()).unwrap();
        let v = &r.grader_variance;
        assert!(v["g2"] > v["g0"] && v["g2"] > v["g1"]);
        let unweighted = [(0.9 + 0.9 + 0.1) / 3.0, (0.5 + 0.5 + 1.0) / 3.0];
        for (i, accurate) in [0.9, 0.5].into_iter().enumerate() {
            let q = r.consensus_grade[&format!("item{i}")];
            assert!((q - accurate).abs() < (unweighted[i] - accurate).abs());
        }
    }

    #[test]
    fn leave_one_out_examples() {
        let p = VancouverParams::default();
        let m = reviewer_matrix(&[&[Some(0.4)], &[Some(0.8)]]);
        let equal: BTreeMap<String, f64> =
            [("g0".to_string(), 0.01), ("g1".to_string(), 0.01)].into();
        assert_eq!(leave_one_out(&m, "item0", "g0", &equal, &p), Some(0.8));
        // A grader that did not grade the item leaves the full weighted mean.
        let full = leave_one_out(&m, "item0", "nobody", &equal, &p).unwrap();
        assert!((full - 0.6).abs() < 1e-12);
        assert_eq!(leave_one_out(&m, "item0", "g1", &equal, &p), Some(0.4));

        let floor = p.variance_floor;
        let m = reviewer_matrix(&[&[Some(0.6)], &[Some(0.6)], &[Some(0.0)]]);
        let vars: BTreeMap<String, f64> = [
            ("g0".to_string(), floor),
            ("g1".to_string(), floor),
            ("g2".to_string(), 4.0 * floor),
        ]
        .into();
        let loo = leave_one_out(&m, "item0", "g2", &vars, &p).unwrap();
        assert!((loo - 0.6).abs() < 1e-12);
        // Direct weighted-mean formula with the third grader included.
        let with_all = leave_one_out(&m, "item0", "nobody", &vars, &p).unwrap();
        let expected = (0.6 / floor + 0.6 / floor) / (1.0 / floor + 1.0 / floor + 0.25 / floor);
        assert!((with_all - expected).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let m = GradeMatrix::default();
        assert_eq!(
            vancouver(&m, &VancouverParams::default()),
            Err(ConsensusError::EmptyMatrix)
        );
        let m = reviewer_matrix(&[&[Some(0.5), None]]);
        assert_eq!(
            vancouver(&m, &VancouverParams::default()),
            Err(ConsensusError::IsolatedItem("item1".into()))
        );
        let bad = VancouverParams {
            epsilon: 0.0,
            ..VancouverParams::default()
        };
        let m = reviewer_matrix(&[&[Some(0.5)]]);
        assert!(matches!(vancouver(&m, &bad), Err(ConsensusError::InvalidParams(_))));
    }

    #[test]
    fn zero_self_weight_falls_back_to_plain_mean_for_self_only_items() {
        let mut m = GradeMatrix::new(
            vec![model("a"), model("b")],
            [("A".to_string(), "a".to_string()), ("B".to_string(), "b".to_string())],
        )
        .unwrap();
        m.insert("a", "A", Grade::implicit_self()).unwrap();
        m.insert("b", "B", Grade::implicit_self()).unwrap();
        m.insert("a", "B", Grade::review(0.4).unwrap()).unwrap();
        let p = VancouverParams {
            self_grade_weight: 0.0,
            ..VancouverParams::default()
        };
        let r = vancouver(&m, &p).unwrap();
        assert_eq!(r.consensus_grade["A"], 1.0);
        assert!((r.consensus_grade["B"] - 0.4).abs() < 1e-12);
    }
}
