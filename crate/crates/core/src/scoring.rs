//! Field-level accuracy of a recommendation against ground-truth entries.
//!
//! Entries are paired by normalized medication name only. A pair is a full
//! match when enough of the five secondary fields also agree; precision,
//! recall and F1 are computed over full matches.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{canonical_text, MedicationEntry, Recommendation};

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("ground truth has no entries")]
    EmptyTruth,
    #[error("reading synonym table {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("synonym table {path} is invalid: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    Name,
    Dosage,
    Route,
    Frequency,
    Timing,
    Indication,
}

impl Field {
    pub const SECONDARY: [Field; 5] = [
        Field::Dosage,
        Field::Route,
        Field::Frequency,
        Field::Timing,
        Field::Indication,
    ];

    fn of(self, e: &MedicationEntry) -> &str {
        match self {
            Field::Name => &e.name,
            Field::Dosage => &e.dosage,
            Field::Route => &e.route,
            Field::Frequency => &e.frequency,
            Field::Timing => &e.timing,
            Field::Indication => &e.indication,
        }
    }
}

/// Variant -> canonical lookup for the fields that use synonym tables.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynonymTables {
    tables: HashMap<Field, HashMap<String, String>>,
}

const ROUTE_TABLE: &str = include_str!("../data/synonyms/route.json");
const FREQUENCY_TABLE: &str = include_str!("../data/synonyms/frequency.json");

impl SynonymTables {
    /// The tables shipped with the crate.
    pub fn builtin() -> Self {
        let mut t = SynonymTables::default();
        t.add_table(Field::Route, parse_table(ROUTE_TABLE).expect("bundled route table"));
        t.add_table(
            Field::Frequency,
            parse_table(FREQUENCY_TABLE).expect("bundled frequency table"),
        );
        t
    }

    /// Built-in tables, replaced per field by `route.json` / `frequency.json`
    /// when present in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, ScoringError> {
        let mut t = SynonymTables::builtin();
        for (field, file) in [(Field::Route, "route.json"), (Field::Frequency, "frequency.json")] {
            let path = dir.join(file);
            if !path.exists() {
                continue;
            }
            let shown = path.display().to_string();
            let text = std::fs::read_to_string(&path).map_err(|source| ScoringError::Io {
                path: shown.clone(),
                source,
            })?;
            let table = parse_table(&text).map_err(|source| ScoringError::Json {
                path: shown,
                source,
            })?;
            t.tables.remove(&field);
            t.add_table(field, table);
        }
        Ok(t)
    }

    fn add_table(&mut self, field: Field, table: BTreeMap<String, Vec<String>>) {
        let slot = self.tables.entry(field).or_default();
        for (canonical, variants) in table {
            let canonical = canonical_text(&canonical);
            slot.insert(canonical.clone(), canonical.clone());
            for v in variants {
                slot.insert(canonical_text(&v), canonical.clone());
            }
        }
    }

    fn lookup(&self, field: Field, key: &str) -> Option<&str> {
        self.tables.get(&field)?.get(key).map(String::as_str)
    }
}

fn parse_table(text: &str) -> Result<BTreeMap<String, Vec<String>>, serde_json::Error> {
    serde_json::from_str(text)
}

static DOSE_UNIT: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(\d+(?:\.\d+)?)\s*(milligrams?|mg|micrograms?|mcg|µg|μg|ug|grams?|gm|g|milliliters?|millilitres?|ml)\b",
    )
    .expect("valid unit pattern")
});

fn canonical_unit(unit: &str) -> &'static str {
    match unit {
        "mg" | "milligram" | "milligrams" => "mg",
        "mcg" | "µg" | "μg" | "ug" | "microgram" | "micrograms" => "mcg",
        "g" | "gm" | "gram" | "grams" => "g",
        _ => "ml",
    }
}

fn normalize_with(tables: &SynonymTables, field: Field, raw: &str) -> String {
    let text = canonical_text(raw);
    match field {
        Field::Dosage => DOSE_UNIT
            .replace_all(&text, |c: &regex::Captures| {
                format!("{}{}", &c[1], canonical_unit(&c[2]))
            })
            .into_owned(),
        Field::Route | Field::Frequency => {
            let key = text.trim_end_matches('.');
            tables
                .lookup(field, key)
                .or_else(|| tables.lookup(field, &text))
                .map(str::to_string)
                .unwrap_or_else(|| key.to_string())
        }
        Field::Name | Field::Timing | Field::Indication => text,
    }
}

static BUILTIN: LazyLock<SynonymTables> = LazyLock::new(SynonymTables::builtin);

/// Canonical form of one field value under the built-in synonym tables.
pub fn normalize_field(field: Field, raw: &str) -> String {
    normalize_with(&BUILTIN, field, raw)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub predicted: usize,
    pub truth: usize,
    pub fields_matched: BTreeSet<Field>,
    pub full_match: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub matched_pairs: Vec<MatchedPair>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone)]
pub struct Scorer {
    tables: SynonymTables,
    /// Secondary fields (of five) that must agree for a full match.
    pub min_secondary: usize,
}

impl Default for Scorer {
    fn default() -> Self {
        Scorer {
            tables: SynonymTables::builtin(),
            min_secondary: 3,
        }
    }
}

impl Scorer {
    pub fn new(tables: SynonymTables, min_secondary: usize) -> Self {
        Scorer {
            tables,
            min_secondary,
        }
    }

    pub fn normalize(&self, field: Field, raw: &str) -> String {
        normalize_with(&self.tables, field, raw)
    }

    /// `None` unless names agree; otherwise every agreeing field, name included.
    pub fn match_entry(
        &self,
        predicted: &MedicationEntry,
        truth: &MedicationEntry,
    ) -> Option<BTreeSet<Field>> {
        if self.normalize(Field::Name, &predicted.name) != self.normalize(Field::Name, &truth.name) {
            return None;
        }
        let mut fields: BTreeSet<Field> = Field::SECONDARY
            .into_iter()
            .filter(|f| self.normalize(*f, f.of(predicted)) == self.normalize(*f, f.of(truth)))
            .collect();
        fields.insert(Field::Name);
        Some(fields)
    }

    pub fn score(
        &self,
        predicted: &Recommendation,
        truth: &[MedicationEntry],
    ) -> Result<MatchReport, ScoringError> {
        if truth.is_empty() {
            return Err(ScoringError::EmptyTruth);
        }
        let mut used = vec![false; truth.len()];
        let mut pairs = Vec::new();
        for (p, pe) in predicted.entries.iter().enumerate() {
            let hit = truth
                .iter()
                .enumerate()
                .filter(|(t, _)| !used[*t])
                .find_map(|(t, te)| self.match_entry(pe, te).map(|f| (t, f)));
            if let Some((t, fields)) = hit {
                used[t] = true;
                let full_match = fields.len() > self.min_secondary;
                pairs.push(MatchedPair {
                    predicted: p,
                    truth: t,
                    fields_matched: fields,
                    full_match,
                });
            }
        }
        let full = pairs.iter().filter(|p| p.full_match).count() as f64;
        let precision = if predicted.entries.is_empty() {
            0.0
        } else {
            full / predicted.entries.len() as f64
        };
        let recall = full / truth.len() as f64;
        Ok(MatchReport {
            matched_pairs: pairs,
            precision,
            recall,
            f1: f1_score(precision, recall),
        })
    }
}

pub fn match_entry(predicted: &MedicationEntry, truth: &MedicationEntry) -> Option<BTreeSet<Field>> {
    Scorer::default().match_entry(predicted, truth)
}

pub fn score_recommendation(
    predicted: &Recommendation,
    truth: &[MedicationEntry],
) -> Result<MatchReport, ScoringError> {
    Scorer::default().score(predicted, truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(name: &str, dosage: &str, route: &str, freq: &str, timing: &str, ind: &str) -> MedicationEntry {
        MedicationEntry {
            name: name.into(),
            dosage: dosage.into(),
            route: route.into(),
            frequency: freq.into(),
            timing: timing.into(),
            indication: ind.into(),
        }
    }

    fn metformin() -> MedicationEntry {
        entry("Metformin", "500 mg", "oral", "twice daily", "with meals", "type 2 diabetes")
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_field(Field::Dosage, "500 milligrams"), "500mg");
        assert_eq!(normalize_field(Field::Dosage, "100 µg"), "100mcg");
        assert_eq!(normalize_field(Field::Dosage, "1 Gram"), "1g");
        assert_eq!(normalize_field(Field::Dosage, "2.5  MG daily"), "2.5mg daily");
        assert_eq!(normalize_field(Field::Route, "PO"), "oral");
        assert_eq!(normalize_field(Field::Route, "by mouth"), "oral");
        assert_eq!(normalize_field(Field::Frequency, "BID"), "twice daily");
        assert_eq!(normalize_field(Field::Frequency, "b.i.d."), "twice daily");
        assert_eq!(normalize_field(Field::Frequency, "2 times daily"), "twice daily");
        assert_eq!(normalize_field(Field::Frequency, "qd"), "once daily");
        assert_eq!(normalize_field(Field::Name, "  Metformin "), "metformin");
        assert_eq!(normalize_field(Field::Route, "intrathecal"), "intrathecal");
    }

    #[test]
    fn match_entry_examples() {
        let all: BTreeSet<Field> = [Field::Name].into_iter().chain(Field::SECONDARY).collect();
        assert_eq!(match_entry(&metformin(), &metformin()), Some(all));

        let mut other_dose = metformin();
        other_dose.dosage = "1000 mg".into();
        let expected: BTreeSet<Field> = [
            Field::Name,
            Field::Route,
            Field::Frequency,
            Field::Timing,
            Field::Indication,
        ]
        .into();
        assert_eq!(match_entry(&other_dose, &metformin()), Some(expected));

        let mut metoprolol = metformin();
        metoprolol.name = "Metoprolol".into();
        assert_eq!(match_entry(&metoprolol, &metformin()), None);
    }

    #[test]
    fn empty_timing_only_matches_empty_timing() {
        let mut a = metformin();
        a.timing = String::new();
        let fields = match_entry(&a, &metformin()).unwrap();
        assert!(!fields.contains(&Field::Timing));
        let fields = match_entry(&a, &a).unwrap();
        assert!(fields.contains(&Field::Timing));
    }

    #[test]
    fn synonyms_count_as_matches() {
        let p = entry("metformin", "500 milligrams", "PO", "BID", "with meals", "Type 2 Diabetes");
        assert_eq!(match_entry(&p, &metformin()).unwrap().len(), 6);
    }

    fn truth3() -> Vec<MedicationEntry> {
        vec![
            metformin(),
            entry("Lisinopril", "10 mg", "oral", "once daily", "", "hypertension"),
            entry("Atorvastatin", "20 mg", "oral", "once daily", "at bedtime", "hyperlipidemia"),
        ]
    }

    #[test]
    fn scoring_examples() {
        let truth = truth3();
        let r = score_recommendation(&Recommendation::new(truth.clone(), None).unwrap(), &truth).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));

        let disjoint = Recommendation::new(
            vec![entry("Aspirin", "81 mg", "oral", "daily", "", "cad")],
            None,
        )
        .unwrap();
        assert_eq!(score_recommendation(&disjoint, &truth).unwrap().f1, 0.0);

        // 4 predicted, 3 truth: two full matches, one name-only match with
        // too few agreeing fields, one hallucinated entry.
        let mut weak = truth[2].clone();
        weak.dosage = "80 mg".into();
        weak.frequency = "twice daily".into();
        weak.indication = "prevention".into();
        let predicted = Recommendation::new(
            vec![
                truth[0].clone(),
                truth[1].clone(),
                weak,
                entry("Aspirin", "81 mg", "oral", "daily", "", "cad"),
            ],
            None,
        )
        .unwrap();
        let r = score_recommendation(&predicted, &truth).unwrap();
        assert_eq!(r.matched_pairs.len(), 3);
        assert_eq!(r.matched_pairs.iter().filter(|p| p.full_match).count(), 2);
        assert_eq!(r.precision, 0.5);
        assert!((r.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.f1 - 0.571_428_571_428_571_4).abs() < 1e-12);

        assert!(matches!(
            score_recommendation(&predicted, &[]),
            Err(ScoringError::EmptyTruth)
        ));
    }

    #[test]
    fn threshold_is_configurable() {
        let mut p = metformin();
        p.dosage = "1 g".into();
        p.frequency = "once daily".into();
        p.timing = String::new();
        let rec = Recommendation::new(vec![p], None).unwrap();
        assert_eq!(score_recommendation(&rec, &[metformin()]).unwrap().f1, 0.0);
        let lenient = Scorer::new(SynonymTables::builtin(), 2);
        assert_eq!(lenient.score(&rec, &[metformin()]).unwrap().f1, 1.0);
    }

    #[test]
    fn load_dir_replaces_a_table() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("route.json"), r#"{"enteral": ["ng tube", "oral"]}"#).unwrap();
        let t = SynonymTables::load_dir(dir.path()).unwrap();
        let s = Scorer::new(t, 3);
        assert_eq!(s.normalize(Field::Route, "NG tube"), "enteral");
        assert_eq!(s.normalize(Field::Route, "po"), "po");
        assert_eq!(s.normalize(Field::Frequency, "bid"), "twice daily");
    }

    fn arb_entry() -> impl Strategy<Value = MedicationEntry> {
        let name = prop::sample::select(vec!["a", "b", "c", "d", "e", "f"]);
        let val = prop::sample::select(vec!["x", "y"]);
        (name, val.clone(), val.clone(), val.clone(), val.clone(), val).prop_map(
            |(n, d, r, f, t, i)| entry(n, d, r, f, t, i),
        )
    }

    fn arb_rec() -> impl Strategy<Value = Vec<MedicationEntry>> {
        prop::collection::vec(arb_entry(), 0..6).prop_map(|mut v| {
            let mut seen = BTreeSet::new();
            v.retain(|e| seen.insert(e.name.clone()));
            v
        })
    }

    proptest! {
        #[test]
        fn scores_are_bounded_and_order_free(pred in arb_rec(), truth in arb_rec(), seed in any::<u64>()) {
            prop_assume!(!truth.is_empty());
            let r = score_recommendation(&Recommendation::new(pred.clone(), None).unwrap(), &truth).unwrap();
            for v in [r.precision, r.recall, r.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let mut p2 = pred.clone();
            let mut t2 = truth.clone();
            crate::sampling::seeded_shuffle(&mut p2, seed);
            crate::sampling::seeded_shuffle(&mut t2, seed.wrapping_add(1));
            let r2 = score_recommendation(&Recommendation::new(p2, None).unwrap(), &t2).unwrap();
            prop_assert_eq!((r.precision, r.recall, r.f1), (r2.precision, r2.recall, r2.f1));
        }

        #[test]
        fn unmatched_extra_never_helps_precision(pred in arb_rec(), truth in arb_rec()) {
            prop_assume!(!truth.is_empty());
            let base = score_recommendation(&Recommendation::new(pred.clone(), None).unwrap(), &truth).unwrap();
            let mut more = pred.clone();
            more.push(entry("zz-unlisted", "x", "x", "x", "x", "x"));
            let r = score_recommendation(&Recommendation::new(more, None).unwrap(), &truth).unwrap();
            prop_assert!(r.precision <= base.precision);
            prop_assert!(r.f1 <= base.f1);
        }

        #[test]
        fn matched_extra_never_hurts_recall(pred in arb_rec(), truth in arb_rec(), pick in any::<prop::sample::Index>()) {
            prop_assume!(!truth.is_empty());
            let t = truth[pick.index(truth.len())].clone();
            prop_assume!(!pred.iter().any(|e| e.name == t.name));
            let base = score_recommendation(&Recommendation::new(pred.clone(), None).unwrap(), &truth).unwrap();
            let mut more = pred.clone();
            more.push(t);
            let r = score_recommendation(&Recommendation::new(more, None).unwrap(), &truth).unwrap();
            prop_assert!(r.recall >= base.recall);
        }
    }
}
