//! Sparse reviewer x response grade matrix.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Grade, GradeKind, ModelId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MatrixError {
    #[error("unknown grader {0:?}")]
    UnknownGrader(String),
    #[error("unknown item {0:?}")]
    UnknownItem(String),
    #[error("{grader:?} may not explicitly review its own response {item:?}")]
    SelfReview { grader: String, item: String },
    #[error("implicit grade on {item:?} must come from its author, not {grader:?}")]
    ForeignImplicit { grader: String, item: String },
    #[error("cell ({grader:?}, {item:?}) is already filled")]
    Occupied { grader: String, item: String },
    #[error("item {0:?} is listed twice")]
    DuplicateItem(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeCell {
    pub grader: String,
    pub item: String,
    #[serde(flatten)]
    pub grade: Grade,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixItem {
    pub label: String,
    pub author: String,
}

#[derive(Deserialize)]
struct RawMatrix {
    graders: Vec<ModelId>,
    items: Vec<MatrixItem>,
    cells: Vec<GradeCell>,
}

#[derive(Serialize)]
struct MatrixView<'a> {
    graders: &'a [ModelId],
    items: Vec<MatrixItem>,
    cells: Vec<GradeCell>,
}

/// Grades keyed by `(grader name, item label)`. Cells never depend on
/// insertion order.
#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct GradeMatrix {
    graders: Vec<ModelId>,
    authors: BTreeMap<String, String>,
    cells: BTreeMap<(String, String), Grade>,
}

impl Serialize for GradeMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        MatrixView {
            graders: &self.graders,
            items: self
                .authors
                .iter()
                .map(|(label, author)| MatrixItem {
                    label: label.clone(),
                    author: author.clone(),
                })
                .collect(),
            cells: self.cells().collect(),
        }
        .serialize(s)
    }
}

impl TryFrom<RawMatrix> for GradeMatrix {
    type Error = MatrixError;

    fn try_from(raw: RawMatrix) -> Result<Self, Self::Error> {
        let mut m = GradeMatrix::new(
            raw.graders,
            raw.items.into_iter().map(|i| (i.label, i.author)),
        )?;
        for c in raw.cells {
            m.insert(&c.grader, &c.item, c.grade)?;
        }
        Ok(m)
    }
}

impl GradeMatrix {
    /// `items` pairs each response label with the name of its author.
    pub fn new(
        graders: Vec<ModelId>,
        items: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, MatrixError> {
        let mut authors = BTreeMap::new();
        for (label, author) in items {
            if !graders.iter().any(|g| g.name() == author) {
                return Err(MatrixError::UnknownGrader(author));
            }
            if authors.insert(label.clone(), author).is_some() {
                return Err(MatrixError::DuplicateItem(label));
            }
        }
        Ok(GradeMatrix {
            graders,
            authors,
            cells: BTreeMap::new(),
        })
    }

    pub fn insert(&mut self, grader: &str, item: &str, grade: Grade) -> Result<(), MatrixError> {
        if !self.graders.iter().any(|g| g.name() == grader) {
            return Err(MatrixError::UnknownGrader(grader.into()));
        }
        let author = self
            .authors
            .get(item)
            .ok_or_else(|| MatrixError::UnknownItem(item.into()))?;
        let own = author == grader;
        match grade.kind() {
            GradeKind::ExplicitReview if own => {
                return Err(MatrixError::SelfReview {
                    grader: grader.into(),
                    item: item.into(),
                })
            }
            GradeKind::ImplicitSelf if !own => {
                return Err(MatrixError::ForeignImplicit {
                    grader: grader.into(),
                    item: item.into(),
                })
            }
            _ => {}
        }
        let key = (grader.to_string(), item.to_string());
        if self.cells.contains_key(&key) {
            return Err(MatrixError::Occupied {
                grader: key.0,
                item: key.1,
            });
        }
        self.cells.insert(key, grade);
        Ok(())
    }

    pub fn graders(&self) -> &[ModelId] {
        &self.graders
    }

    /// Item labels in sorted order.
    pub fn items(&self) -> impl Iterator<Item = &str> {
        self.authors.keys().map(String::as_str)
    }

    pub fn item_count(&self) -> usize {
        self.authors.len()
    }

    pub fn author_of(&self, item: &str) -> Option<&str> {
        self.authors.get(item).map(String::as_str)
    }

    pub fn get(&self, grader: &str, item: &str) -> Option<Grade> {
        self.cells
            .get(&(grader.to_string(), item.to_string()))
            .copied()
    }

    pub fn cells(&self) -> impl Iterator<Item = GradeCell> + '_ {
        self.cells.iter().map(|((grader, item), grade)| GradeCell {
            grader: grader.clone(),
            item: item.clone(),
            grade: *grade,
        })
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn explicit_count(&self) -> usize {
        self.cells.values().filter(|g| g.is_explicit()).count()
    }

    pub fn implicit_count(&self) -> usize {
        self.cells.len() - self.explicit_count()
    }

    /// Explicit review grades an item received, in grader-name order.
    pub fn explicit_grades_on(&self, item: &str) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|((_, i), g)| i == item && g.is_explicit())
            .map(|(_, g)| g.value())
            .collect()
    }

    /// Items carrying at least one grade.
    pub fn graded_items(&self) -> BTreeSet<&str> {
        self.cells.keys().map(|(_, i)| i.as_str()).collect()
    }

    /// Copy restricted to items that received at least one grade.
    pub fn retain_graded(&self) -> GradeMatrix {
        let graded = self.graded_items();
        GradeMatrix {
            graders: self.graders.clone(),
            authors: self
                .authors
                .iter()
                .filter(|(label, _)| graded.contains(label.as_str()))
                .map(|(l, a)| (l.clone(), a.clone()))
                .collect(),
            cells: self.cells.clone(),
        }
    }
}
