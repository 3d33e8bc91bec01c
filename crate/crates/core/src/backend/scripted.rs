//! Deterministic canned-response backend.
//!
//! A [`Script`] maps `(model name, prompt fingerprint)` to a canned reply
//! with a synthetic latency. Lookups fall back from the exact fingerprint to
//! a per-schema entry, then to a catch-all entry for the model, then to the
//! same three keys under the `"*"` wildcard model, and finally to the
//! script default.

use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{CallError, CompletionRequest, ModelClient, Outcome, RawReply, ResponseSchema};

pub const WILDCARD_MODEL: &str = "*";

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("reading script {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("script is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("script has two entries for model {model:?} under the same key")]
    Duplicate { model: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<ResponseSchema>,
    #[serde(default)]
    pub raw_text: String,
    #[serde(default)]
    pub elapsed_ms: u64,
    #[serde(default = "ok_outcome")]
    pub outcome: Outcome,
    /// Real (tokio) time the call takes, independent of the reported latency.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub delay_ms: u64,
}

fn ok_outcome() -> Outcome {
    Outcome::Ok
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

impl ScriptEntry {
    pub fn reply(model: impl Into<String>, raw_text: impl Into<String>, elapsed_ms: u64) -> Self {
        ScriptEntry {
            model: model.into(),
            fingerprint: None,
            schema: None,
            raw_text: raw_text.into(),
            elapsed_ms,
            outcome: Outcome::Ok,
            delay_ms: 0,
        }
    }

    pub fn for_schema(mut self, schema: ResponseSchema) -> Self {
        self.schema = Some(schema);
        self
    }

    pub fn for_fingerprint(mut self, fingerprint: impl Into<String>) -> Self {
        self.fingerprint = Some(fingerprint.into());
        self
    }

    pub fn with_outcome(mut self, outcome: Outcome) -> Self {
        self.outcome = outcome;
        self
    }

    pub fn with_delay(mut self, delay_ms: u64) -> Self {
        self.delay_ms = delay_ms;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScriptDefault {
    #[default]
    Error,
    Text {
        raw_text: String,
        #[serde(default)]
        elapsed_ms: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Key {
    Fingerprint(String),
    Schema(ResponseSchema),
    Any,
}

#[derive(Serialize, Deserialize)]
struct ScriptFile {
    #[serde(default)]
    default: ScriptDefault,
    #[serde(default)]
    entries: Vec<ScriptEntry>,
}

/// Read-only after construction; lookups are pure.
#[derive(Debug, Clone, Default)]
pub struct Script {
    default: ScriptDefault,
    entries: Vec<ScriptEntry>,
    index: HashMap<(String, Key), usize>,
}

impl Script {
    pub fn new(default: ScriptDefault) -> Self {
        Script {
            default,
            ..Script::default()
        }
    }

    pub fn from_entries(
        default: ScriptDefault,
        entries: impl IntoIterator<Item = ScriptEntry>,
    ) -> Result<Self, ScriptError> {
        let mut script = Script::new(default);
        for e in entries {
            script.push(e)?;
        }
        Ok(script)
    }

    pub fn push(&mut self, entry: ScriptEntry) -> Result<(), ScriptError> {
        let key = match (&entry.fingerprint, entry.schema) {
            (Some(fp), _) => Key::Fingerprint(fp.clone()),
            (None, Some(schema)) => Key::Schema(schema),
            (None, None) => Key::Any,
        };
        let slot = (entry.model.clone(), key);
        if self.index.contains_key(&slot) {
            return Err(ScriptError::Duplicate { model: entry.model });
        }
        self.index.insert(slot, self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ScriptError> {
        let file: ScriptFile = serde_json::from_str(text)?;
        Script::from_entries(file.default, file.entries)
    }

    pub fn load(path: &Path) -> Result<Self, ScriptError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScriptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Script::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let file = ScriptFile {
            default: self.default.clone(),
            entries: self.entries.clone(),
        };
        serde_json::to_string_pretty(&file).expect("script serializes")
    }

    pub fn lookup(&self, model: &str, schema: ResponseSchema, fingerprint: &str) -> Option<&ScriptEntry> {
        let keys = [
            Key::Fingerprint(fingerprint.to_string()),
            Key::Schema(schema),
            Key::Any,
        ];
        [model, WILDCARD_MODEL]
            .into_iter()
            .flat_map(|m| keys.iter().map(move |k| (m.to_string(), k.clone())))
            .find_map(|slot| self.index.get(&slot))
            .map(|&i| &self.entries[i])
    }

    pub fn default_reply(&self) -> &ScriptDefault {
        &self.default
    }
}

#[derive(Debug, Clone)]
pub struct ScriptedClient {
    script: std::sync::Arc<Script>,
}

impl ScriptedClient {
    pub fn new(script: std::sync::Arc<Script>) -> Self {
        ScriptedClient { script }
    }
}

#[async_trait]
impl ModelClient for ScriptedClient {
    async fn call(&self, req: &CompletionRequest) -> Result<RawReply, CallError> {
        let fp = req.fingerprint();
        let Some(entry) = self
            .script
            .lookup(req.model.name(), req.response_schema, &fp)
        else {
            return match self.script.default_reply() {
                ScriptDefault::Error => Err(CallError::Transport {
                    message: format!(
                        "script has no entry for {} ({}, {fp})",
                        req.model,
                        req.response_schema.as_str()
                    ),
                    elapsed: Some(Duration::ZERO),
                }),
                ScriptDefault::Text {
                    raw_text,
                    elapsed_ms,
                } => Ok(RawReply {
                    text: raw_text.clone(),
                    elapsed: Some(Duration::from_millis(*elapsed_ms)),
                }),
            };
        };
        if entry.delay_ms > 0 {
            tokio::time::sleep(Duration::from_millis(entry.delay_ms)).await;
        }
        let elapsed = Some(Duration::from_millis(entry.elapsed_ms));
        match entry.outcome {
            Outcome::Ok | Outcome::ParseFailed => Ok(RawReply {
                text: entry.raw_text.clone(),
                elapsed,
            }),
            Outcome::TransportFailed => Err(CallError::Transport {
                message: "scripted transport failure".into(),
                elapsed,
            }),
            Outcome::TimedOut => Err(CallError::TimedOut { elapsed }),
        }
    }
}
