//! Uniform completion interface over heterogeneous model providers.
//!
//! A [`ModelClient`] performs one raw call. [`complete`] wraps it with the
//! deadline, parse-retry and transport-retry policy, and folds every failure
//! into a [`CompletionResult`] outcome so that nothing is thrown past this
//! boundary.

mod http;
mod parse;
mod scripted;

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{duration_ms, Grade, ModelId, Recommendation};

pub use http::{live_backends, AnthropicClient, Endpoint, OllamaClient, OpenAiClient};
pub use parse::{parse_recommendation, parse_review, ParseError};
pub use scripted::{Script, ScriptDefault, ScriptEntry, ScriptError, ScriptedClient};

/// Default per-call deadline.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResponseSchema {
    Recommendation,
    Review,
    /// Free text, used when synthesizing clinical vignettes.
    Vignette,
}

impl ResponseSchema {
    pub fn as_str(self) -> &'static str {
        match self {
            ResponseSchema::Recommendation => "recommendation",
            ResponseSchema::Review => "review",
            ResponseSchema::Vignette => "vignette",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub model: ModelId,
    pub system_prompt: String,
    pub user_prompt: String,
    pub response_schema: ResponseSchema,
    pub timeout: Duration,
    pub temperature: Option<f32>,
}

impl CompletionRequest {
    pub fn fingerprint(&self) -> String {
        prompt_fingerprint(self.response_schema, &self.user_prompt)
    }
}

/// Stable key for script lookups: hash of the schema and the first 64
/// characters of the user prompt.
pub fn prompt_fingerprint(schema: ResponseSchema, user_prompt: &str) -> String {
    let head: String = user_prompt.chars().take(64).collect();
    let mut hasher = Sha256::new();
    hasher.update(schema.as_str().as_bytes());
    hasher.update([0u8]);
    hasher.update(head.as_bytes());
    hex::encode(&hasher.finalize()[..8])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Ok,
    ParseFailed,
    TransportFailed,
    TimedOut,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Ok => "ok",
            Outcome::ParseFailed => "parse-failed",
            Outcome::TransportFailed => "transport-failed",
            Outcome::TimedOut => "timed-out",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewVerdict {
    pub grade: Grade,
    #[serde(default)]
    pub critique: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "schema", rename_all = "kebab-case")]
pub enum Parsed {
    Recommendation(Recommendation),
    Review(ReviewVerdict),
    Vignette { text: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub model: ModelId,
    pub raw_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed: Option<Parsed>,
    #[serde(rename = "elapsed_ms", with = "duration_ms")]
    pub elapsed: Duration,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CompletionResult {
    pub fn is_ok(&self) -> bool {
        self.outcome == Outcome::Ok
    }

    pub fn recommendation(&self) -> Option<&Recommendation> {
        match &self.parsed {
            Some(Parsed::Recommendation(r)) => Some(r),
            _ => None,
        }
    }

    pub fn verdict(&self) -> Option<&ReviewVerdict> {
        match &self.parsed {
            Some(Parsed::Review(v)) => Some(v),
            _ => None,
        }
    }
}

/// What a provider returned for one call, before parsing.
#[derive(Debug, Clone, PartialEq)]
pub struct RawReply {
    pub text: String,
    /// Provider-reported latency. Scripted clients use this to replay
    /// recorded timings; live clients leave it empty and the wall clock is
    /// used instead.
    pub elapsed: Option<Duration>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CallError {
    Transport {
        message: String,
        elapsed: Option<Duration>,
    },
    TimedOut {
        elapsed: Option<Duration>,
    },
}

#[async_trait]
pub trait ModelClient: Send + Sync {
    async fn call(&self, req: &CompletionRequest) -> Result<RawReply, CallError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct CallPolicy {
    pub timeout: Duration,
    pub parse_retries: u32,
    pub transport_retries: u32,
    pub temperature: Option<f32>,
}

impl Default for CallPolicy {
    fn default() -> Self {
        CallPolicy {
            timeout: DEFAULT_TIMEOUT,
            parse_retries: 1,
            transport_retries: 0,
            temperature: None,
        }
    }
}

fn parse_as(schema: ResponseSchema, raw: &str) -> Result<Parsed, ParseError> {
    match schema {
        ResponseSchema::Recommendation => parse_recommendation(raw).map(Parsed::Recommendation),
        ResponseSchema::Review => parse_review(raw).map(Parsed::Review),
        ResponseSchema::Vignette => {
            let text = raw.trim();
            if text.is_empty() {
                Err(ParseError::Empty)
            } else {
                Ok(Parsed::Vignette {
                    text: text.to_string(),
                })
            }
        }
    }
}

/// Runs one completion under `policy`.
///
/// The whole exchange, retries included, shares a single deadline of
/// `req.timeout`. Elapsed time covers provider calls only, never parsing.
pub async fn complete(
    client: &dyn ModelClient,
    req: &CompletionRequest,
    policy: &CallPolicy,
) -> CompletionResult {
    let deadline = tokio::time::Instant::now() + req.timeout;
    let mut elapsed = Duration::ZERO;
    let mut parse_left = policy.parse_retries;
    let mut transport_left = policy.transport_retries;

    let fail = |elapsed, outcome, raw_text: String, error: String| CompletionResult {
        model: req.model.clone(),
        raw_text,
        parsed: None,
        elapsed,
        outcome,
        error: Some(error),
    };

    loop {
        let started = tokio::time::Instant::now();
        let attempt = tokio::time::timeout_at(deadline, client.call(req)).await;
        let wall = started.elapsed();

        match attempt {
            Err(_) => {
                return fail(
                    elapsed + wall,
                    Outcome::TimedOut,
                    String::new(),
                    format!("no reply within {} ms", req.timeout.as_millis()),
                )
            }
            Ok(Err(CallError::TimedOut { elapsed: reported })) => {
                return fail(
                    elapsed + reported.unwrap_or(wall),
                    Outcome::TimedOut,
                    String::new(),
                    "provider reported timeout".into(),
                )
            }
            Ok(Err(CallError::Transport {
                message,
                elapsed: reported,
            })) => {
                elapsed += reported.unwrap_or(wall);
                if transport_left > 0 {
                    transport_left -= 1;
                    continue;
                }
                return fail(elapsed, Outcome::TransportFailed, String::new(), message);
            }
            Ok(Ok(reply)) => {
                elapsed += reply.elapsed.unwrap_or(wall);
                match parse_as(req.response_schema, &reply.text) {
                    Ok(parsed) => {
                        return CompletionResult {
                            model: req.model.clone(),
                            raw_text: reply.text,
                            parsed: Some(parsed),
                            elapsed,
                            outcome: Outcome::Ok,
                            error: None,
                        }
                    }
                    Err(e) if parse_left == 0 => {
                        return fail(elapsed, Outcome::ParseFailed, reply.text, e.to_string())
                    }
                    Err(_) => parse_left -= 1,
                }
            }
        }
    }
}

/// Resolves ensemble members to clients and carries the call policy.
#[derive(Clone, Default)]
pub struct Backends {
    clients: HashMap<String, Arc<dyn ModelClient>>,
    pub policy: CallPolicy,
}

impl Backends {
    pub fn new(policy: CallPolicy) -> Self {
        Backends {
            clients: HashMap::new(),
            policy,
        }
    }

    pub fn insert(&mut self, model_name: impl Into<String>, client: Arc<dyn ModelClient>) {
        self.clients.insert(model_name.into(), client);
    }

    pub fn get(&self, model: &ModelId) -> Option<Arc<dyn ModelClient>> {
        self.clients.get(model.name()).cloned()
    }

    pub fn contains(&self, model: &ModelId) -> bool {
        self.clients.contains_key(model.name())
    }

    pub fn request(
        &self,
        model: &ModelId,
        schema: ResponseSchema,
        system_prompt: String,
        user_prompt: String,
    ) -> CompletionRequest {
        CompletionRequest {
            model: model.clone(),
            system_prompt,
            user_prompt,
            response_schema: schema,
            timeout: self.policy.timeout,
            temperature: self.policy.temperature,
        }
    }

    /// Completes `req` with the client registered for its model. A missing
    /// client is reported as a transport failure.
    pub async fn complete(&self, req: &CompletionRequest) -> CompletionResult {
        match self.get(&req.model) {
            Some(client) => complete(client.as_ref(), req, &self.policy).await,
            None => CompletionResult {
                model: req.model.clone(),
                raw_text: String::new(),
                parsed: None,
                elapsed: Duration::ZERO,
                outcome: Outcome::TransportFailed,
                error: Some(format!("no backend registered for {}", req.model)),
            },
        }
    }
}
