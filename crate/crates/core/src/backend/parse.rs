//! Structured-output extraction from free-form model text.
//!
//! Models wrap JSON in prose and code fences, so parsing scans for the first
//! embedded JSON object that satisfies the requested schema.

use serde_json::{Map, Value};
use thiserror::Error;

use super::ReviewVerdict;
use crate::domain::{Grade, MedicationEntry, Recommendation};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("no JSON object found in model output")]
    NoJsonFound,
    #[error("JSON does not match the expected schema: {0}")]
    SchemaMismatch(String),
    #[error("review carries no numeric grade")]
    MissingGrade,
    #[error("model output is empty")]
    Empty,
}

/// Every JSON object embedded in `text`, in order of its opening brace.
fn embedded_objects(text: &str) -> impl Iterator<Item = Map<String, Value>> + '_ {
    text.match_indices('{').filter_map(move |(start, _)| {
        let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(map))) => Some(map),
            _ => None,
        }
    })
}

fn field_text(obj: &Map<String, Value>, key: &str) -> Result<String, String> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(String::new()),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Number(n)) => Ok(n.to_string()),
        Some(Value::Bool(b)) => Ok(b.to_string()),
        Some(other) => Err(format!("field {key:?} is not a scalar: {other}")),
    }
}

fn recommendation_from(obj: &Map<String, Value>) -> Result<Recommendation, String> {
    let entries = obj
        .get("entries")
        .ok_or_else(|| "missing \"entries\"".to_string())?
        .as_array()
        .ok_or_else(|| "\"entries\" is not an array".to_string())?;
    if entries.is_empty() {
        return Err("\"entries\" is empty".into());
    }
    let mut out = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let e = e
            .as_object()
            .ok_or_else(|| format!("entry {i} is not an object"))?;
        let name = field_text(e, "name")?;
        if name.trim().is_empty() {
            return Err(format!("entry {i} is missing \"name\""));
        }
        out.push(MedicationEntry {
            name,
            dosage: field_text(e, "dosage")?,
            route: field_text(e, "route")?,
            frequency: field_text(e, "frequency")?,
            timing: field_text(e, "timing")?,
            indication: field_text(e, "indication")?,
        });
    }
    let rationale = match obj.get("rationale") {
        Some(Value::String(s)) if !s.trim().is_empty() => Some(s.clone()),
        _ => None,
    };
    Recommendation::new(out, rationale).map_err(|e| e.to_string())
}

pub fn parse_recommendation(raw_text: &str) -> Result<Recommendation, ParseError> {
    let mut first_mismatch = None;
    for obj in embedded_objects(raw_text) {
        match recommendation_from(&obj) {
            Ok(r) => return Ok(r),
            Err(why) => {
                first_mismatch.get_or_insert(why);
            }
        }
    }
    Err(match first_mismatch {
        Some(why) => ParseError::SchemaMismatch(why),
        None => ParseError::NoJsonFound,
    })
}

fn grade_number(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

pub fn parse_review(raw_text: &str) -> Result<ReviewVerdict, ParseError> {
    let mut saw_json = false;
    for obj in embedded_objects(raw_text) {
        saw_json = true;
        if let Some(g) = obj.get("grade").and_then(grade_number) {
            let grade = Grade::review(g).map_err(|_| ParseError::MissingGrade)?;
            let critique = obj
                .get("critique")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string();
            return Ok(ReviewVerdict { grade, critique });
        }
    }
    Err(if saw_json {
        ParseError::MissingGrade
    } else {
        ParseError::NoJsonFound
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fenced_recommendation_with_prose() {
        let raw = r#"Here is my recommendation:
```json
{"entries": [
  {"name": "Metformin", "dosage": "500 mg", "route": "oral", "frequency": "twice daily", "timing": "with meals", "indication": "type 2 diabetes"},
  {"name": "Lisinopril", "dosage": "10 mg", "route": "oral", "frequency": "once daily", "indication": "hypertension"}
], "rationale": "first-line agents"}
```
Let me know if you need more."#;
        let r = parse_recommendation(raw).unwrap();
        assert_eq!(r.entries.len(), 2);
        assert_eq!(r.entries[1].timing, "");
        assert_eq!(r.rationale.as_deref(), Some("first-line agents"));
    }

    #[test]
    fn prose_only_has_no_json() {
        assert_eq!(
            parse_recommendation("I would start metformin."),
            Err(ParseError::NoJsonFound)
        );
        assert_eq!(parse_review("looks fine to me"), Err(ParseError::NoJsonFound));
    }

    #[test]
    fn entry_without_name_is_a_mismatch() {
        let raw = r#"{"entries": [{"dosage": "5 mg", "route": "oral"}]}"#;
        assert!(matches!(
            parse_recommendation(raw),
            Err(ParseError::SchemaMismatch(_))
        ));
        assert!(matches!(
            parse_recommendation(r#"{"meds": []}"#),
            Err(ParseError::SchemaMismatch(_))
        ));
    }

    #[test]
    fn empty_and_duplicate_entries_are_mismatches() {
        assert!(matches!(
            parse_recommendation(r#"{"entries": []}"#),
            Err(ParseError::SchemaMismatch(_))
        ));
        let dup = r#"{"entries": [{"name": "Aspirin"}, {"name": "aspirin "}]}"#;
        assert!(matches!(
            parse_recommendation(dup),
            Err(ParseError::SchemaMismatch(_))
        ));
    }

    #[test]
    fn nested_object_is_found_after_a_non_matching_one() {
        let raw = r#"{"note": "x"} then {"entries": [{"name": "Aspirin", "dosage": 81}]}"#;
        let r = parse_recommendation(raw).unwrap();
        assert_eq!(r.entries[0].dosage, "81");
    }

    #[test]
    fn review_examples() {
        let v = parse_review(r#"{"grade": 0.9, "critique": "dose ok"}"#).unwrap();
        assert_eq!(v.grade.value(), 0.9);
        assert_eq!(v.critique, "dose ok");
        assert_eq!(parse_review(r#"{"grade": 1.3}"#).unwrap().grade.value(), 1.0);
        assert_eq!(
            parse_review(r#"{"critique": "fine"}"#),
            Err(ParseError::MissingGrade)
        );
        assert_eq!(
            parse_review("```json\n{\"grade\": \"0.25\"}\n```").unwrap().grade.value(),
            0.25
        );
    }
}
