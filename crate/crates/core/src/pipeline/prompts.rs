//! Prompt templates with `{{name}}` placeholders.
//!
//! Defaults are compiled in; any template can be overridden by a file of the
//! same name in a directory passed to [`PromptTemplates::load_dir`].

use std::path::Path;

use regex::{Regex, RegexBuilder};
use serde_json::json;

use crate::domain::{ClinicalNote, MedicationEntry, Recommendation};

const NAMES: [&str; 8] = [
    "generation_system",
    "generation_user",
    "review_system",
    "review_user",
    "synthesis_system",
    "synthesis_user",
    "recommendation_schema",
    "review_schema",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub generation_system: String,
    pub generation_user: String,
    pub review_system: String,
    pub review_user: String,
    pub synthesis_system: String,
    pub synthesis_user: String,
    pub recommendation_schema: String,
    pub review_schema: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            generation_system: include_str!("../../templates/generation_system.txt").into(),
            generation_user: include_str!("../../templates/generation_user.txt").into(),
            review_system: include_str!("../../templates/review_system.txt").into(),
            review_user: include_str!("../../templates/review_user.txt").into(),
            synthesis_system: include_str!("../../templates/synthesis_system.txt").into(),
            synthesis_user: include_str!("../../templates/synthesis_user.txt").into(),
            recommendation_schema: include_str!("../../templates/recommendation_schema.txt").into(),
            review_schema: include_str!("../../templates/review_schema.txt").into(),
        }
    }
}

/// Replaces each `{{key}}` with its value. Unknown placeholders are left as is.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    vars.iter().fold(template.to_string(), |acc, (k, v)| {
        acc.replace(&format!("{{{{{k}}}}}"), v)
    })
}

impl PromptTemplates {
    /// Defaults, overridden by `<name>.txt` files found in `dir`.
    pub fn load_dir(dir: &Path) -> std::io::Result<Self> {
        let mut t = PromptTemplates::default();
        for name in NAMES {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                *t.slot(name) = std::fs::read_to_string(path)?;
            }
        }
        Ok(t)
    }

    fn slot(&mut self, name: &str) -> &mut String {
        match name {
            "generation_system" => &mut self.generation_system,
            "generation_user" => &mut self.generation_user,
            "review_system" => &mut self.review_system,
            "review_user" => &mut self.review_user,
            "synthesis_system" => &mut self.synthesis_system,
            "synthesis_user" => &mut self.synthesis_user,
            "recommendation_schema" => &mut self.recommendation_schema,
            "review_schema" => &mut self.review_schema,
            _ => unreachable!("unknown template {name}"),
        }
    }

    /// `(system, user)` prompts asking for a recommendation.
    pub fn generation(&self, note: &ClinicalNote) -> (String, String) {
        let schema = self.recommendation_schema.trim();
        (
            render(&self.generation_system, &[("schema", schema)]),
            render(
                &self.generation_user,
                &[("vignette", note.vignette.trim()), ("schema", schema)],
            ),
        )
    }

    /// `(system, user)` prompts for one anonymous review. `response` must
    /// already be redacted.
    pub fn review(&self, note: &ClinicalNote, response: &str) -> (String, String) {
        let schema = self.review_schema.trim();
        (
            render(&self.review_system, &[("schema", schema)]),
            render(
                &self.review_user,
                &[
                    ("response", response),
                    ("vignette", note.vignette.trim()),
                    ("schema", schema),
                ],
            ),
        )
    }

    /// `(system, user)` prompts for reverse synthesis of a vignette.
    pub fn synthesis(&self, medications: &[MedicationEntry]) -> (String, String) {
        let list = medications
            .iter()
            .map(|m| {
                let mut line = format!(
                    "- {} {} {} {}",
                    m.name, m.dosage, m.route, m.frequency
                );
                if !m.timing.trim().is_empty() {
                    line.push_str(&format!(" {}", m.timing));
                }
                line.push_str(&format!(" (for {})", m.indication));
                line
            })
            .collect::<Vec<_>>()
            .join("\n");
        (
            self.synthesis_system.clone(),
            render(&self.synthesis_user, &[("medications", &list)]),
        )
    }
}

/// Removes model names from text shown to reviewers.
#[derive(Debug, Clone)]
pub struct Redactor {
    pattern: Option<Regex>,
}

pub const REDACTED: &str = "[model]";

impl Redactor {
    pub fn new<S: AsRef<str>>(names: impl IntoIterator<Item = S>) -> Self {
        let mut names: Vec<String> = names
            .into_iter()
            .map(|n| n.as_ref().trim().to_string())
            .filter(|n| !n.is_empty())
            .collect();
        // Longest first so "gpt-4o" wins over a hypothetical "gpt-4".
        names.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
        names.dedup();
        let pattern = (!names.is_empty()).then(|| {
            let alternation = names
                .iter()
                .map(|n| regex::escape(n))
                .collect::<Vec<_>>()
                .join("|");
            RegexBuilder::new(&alternation)
                .case_insensitive(true)
                .build()
                .expect("escaped names form a valid pattern")
        });
        Redactor { pattern }
    }

    pub fn redact(&self, text: &str) -> String {
        match &self.pattern {
            Some(p) => p.replace_all(text, REDACTED).into_owned(),
            None => text.to_string(),
        }
    }

    /// Canonical JSON rendering of a recommendation with names redacted.
    /// Only parsed fields are shown, never the raw model text.
    pub fn render_recommendation(&self, rec: &Recommendation) -> String {
        let body = json!({
            "entries": rec.entries,
            "rationale": rec.rationale.as_deref().unwrap_or_default(),
        });
        self.redact(&serde_json::to_string_pretty(&body).expect("recommendation serializes"))
    }
}
