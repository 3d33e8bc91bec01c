//! Live HTTP clients for the three supported wire protocols.
//!
//! Structured output is requested through the system prompt only, so the
//! request bodies stay the plain chat shape every compatible server accepts.

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde_json::{json, Value};

use super::{Backends, CallError, CallPolicy, CompletionRequest, ModelClient, RawReply};
use crate::domain::Provider;
use crate::sampling::Registry;

const ANTHROPIC_VERSION: &str = "2023-06-01";
const ANTHROPIC_MAX_TOKENS: u32 = 4096;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoint {
    pub base_url: String,
    pub api_key: Option<String>,
    /// Environment variable the key was read from, for error messages.
    pub key_var: Option<String>,
}

impl Endpoint {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Self {
        Endpoint {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            key_var: None,
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.base_url, path.trim_start_matches('/'))
    }

    fn require_key(&self) -> Result<&str, CallError> {
        self.api_key.as_deref().ok_or_else(|| CallError::Transport {
            message: format!(
                "no API key configured ({} is not set)",
                self.key_var.as_deref().unwrap_or("key variable")
            ),
            elapsed: Some(Duration::ZERO),
        })
    }
}

fn transport(message: impl Into<String>) -> CallError {
    CallError::Transport {
        message: message.into(),
        elapsed: None,
    }
}

async fn post_json(
    builder: reqwest::RequestBuilder,
    body: &Value,
    timeout: Duration,
) -> Result<Value, CallError> {
    let response = builder.timeout(timeout).json(body).send().await.map_err(|e| {
        if e.is_timeout() {
            CallError::TimedOut { elapsed: None }
        } else {
            transport(format!("request failed: {e}"))
        }
    })?;
    let status = response.status();
    let text = response
        .text()
        .await
        .map_err(|e| transport(format!("reading body: {e}")))?;
    if !status.is_success() {
        let snippet: String = text.chars().take(200).collect();
        return Err(transport(format!("HTTP {status}: {snippet}")));
    }
    serde_json::from_str(&text).map_err(|e| transport(format!("response is not JSON: {e}")))
}

fn missing(path: &str) -> CallError {
    transport(format!("response has no {path}"))
}

/// Chat-completions protocol (`POST {base}/chat/completions`).
#[derive(Debug, Clone)]
pub struct OpenAiClient {
    http: reqwest::Client,
    endpoint: Endpoint,
}

impl OpenAiClient {
    pub fn new(http: reqwest::Client, endpoint: Endpoint) -> Self {
        OpenAiClient { http, endpoint }
    }

    pub fn body(req: &CompletionRequest) -> Value {
        let mut body = json!({
            "model": req.model.name(),
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_prompt},
            ],
        });
        if let Some(t) = req.temperature {
            body["temperature"] = json!(t);
        }
        body
    }

    pub fn extract(response: &Value) -> Result<String, CallError> {
        response
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| missing("choices[0].message.content"))
    }
}

#[async_trait]
impl ModelClient for OpenAiClient {
    async fn call(&self, req: &CompletionRequest) -> Result<RawReply, CallError> {
        let key = self.endpoint.require_key()?;
        let builder = self
            .http
            .post(self.endpoint.url("chat/completions"))
            .bearer_auth(key);
        let response = post_json(builder, &Self::body(req), req.timeout).await?;
        Ok(RawReply {
            text: Self::extract(&response)?,
            elapsed: None,
        })
    }
}

/// Messages protocol (`POST {base}/messages`).
#[derive(Debug, Clone)]
pub struct AnthropicClient {
    http: reqwest::Client,
    endpoint: Endpoint,
}

impl AnthropicClient {
    pub fn new(http: reqwest::Client, endpoint: Endpoint) -> Self {
        AnthropicClient { http, endpoint }
    }

    pub fn body(req: &CompletionRequest) -> Value {
        let mut body = json!({
            "model": req.model.name(),
            "max_tokens": ANTHROPIC_MAX_TOKENS,
            "system": req.system_prompt,
            "messages": [{"role": "user", "content": req.user_prompt}],
        });
        if let Some(t) = req.temperature {
            body["temperature"] = json!(t);
        }
        body
    }

    pub fn extract(response: &Value) -> Result<String, CallError> {
        let blocks = response
            .get("content")
            .and_then(Value::as_array)
            .ok_or_else(|| missing("content"))?;
        let text: Vec<&str> = blocks
            .iter()
            .filter(|b| b.get("type").and_then(Value::as_str) == Some("text"))
            .filter_map(|b| b.get("text").and_then(Value::as_str))
            .collect();
        if text.is_empty() {
            return Err(missing("text content block"));
        }
        Ok(text.concat())
    }
}

#[async_trait]
impl ModelClient for AnthropicClient {
    async fn call(&self, req: &CompletionRequest) -> Result<RawReply, CallError> {
        let key = self.endpoint.require_key()?;
        let builder = self
            .http
            .post(self.endpoint.url("messages"))
            .header("x-api-key", key)
            .header("anthropic-version", ANTHROPIC_VERSION);
        let response = post_json(builder, &Self::body(req), req.timeout).await?;
        Ok(RawReply {
            text: Self::extract(&response)?,
            elapsed: None,
        })
    }
}

/// Local REST protocol (`POST {base}/api/chat`, non-streaming).
#[derive(Debug, Clone)]
pub struct OllamaClient {
    http: reqwest::Client,
    endpoint: Endpoint,
}

impl OllamaClient {
    pub fn new(http: reqwest::Client, endpoint: Endpoint) -> Self {
        OllamaClient { http, endpoint }
    }

    pub fn body(req: &CompletionRequest) -> Value {
        let mut body = json!({
            "model": req.model.name(),
            "stream": false,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_prompt},
            ],
        });
        if let Some(t) = req.temperature {
            body["options"] = json!({"temperature": t});
        }
        body
    }

    pub fn extract(response: &Value) -> Result<String, CallError> {
        response
            .pointer("/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| missing("message.content"))
    }
}

#[async_trait]
impl ModelClient for OllamaClient {
    async fn call(&self, req: &CompletionRequest) -> Result<RawReply, CallError> {
        let mut builder = self.http.post(self.endpoint.url("api/chat"));
        if let Some(key) = &self.endpoint.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = post_json(builder, &Self::body(req), req.timeout).await?;
        Ok(RawReply {
            text: Self::extract(&response)?,
            elapsed: None,
        })
    }
}

fn default_base_url(provider: Provider, env: &dyn Fn(&str) -> Option<String>) -> String {
    match provider {
        Provider::OpenaiCompatible => "https://api.openai.com/v1".into(),
        Provider::AnthropicCompatible => "https://api.anthropic.com/v1".into(),
        Provider::OllamaCompatible | Provider::Scripted => {
            let host = env("OLLAMA_HOST").unwrap_or_else(|| "localhost:11434".into());
            if host.starts_with("http://") || host.starts_with("https://") {
                host
            } else {
                format!("http://{host}")
            }
        }
    }
}

fn default_key_var(provider: Provider) -> Option<&'static str> {
    match provider {
        Provider::OpenaiCompatible => Some("OPENAI_API_KEY"),
        Provider::AnthropicCompatible => Some("ANTHROPIC_API_KEY"),
        Provider::OllamaCompatible | Provider::Scripted => None,
    }
}

/// Builds one live client per registry model, reading secrets through `env`.
/// Scripted registry entries are skipped; supply them separately.
pub fn live_backends(
    registry: &Registry,
    policy: CallPolicy,
    env: &dyn Fn(&str) -> Option<String>,
) -> Backends {
    let http = reqwest::Client::new();
    let mut backends = Backends::new(policy);
    for entry in registry.entries() {
        let provider = entry.model.provider();
        let base_url = entry
            .base_url
            .clone()
            .unwrap_or_else(|| default_base_url(provider, env));
        let key_var = entry
            .api_key_env
            .clone()
            .or_else(|| default_key_var(provider).map(str::to_string));
        let mut endpoint = Endpoint::new(base_url, key_var.as_deref().and_then(env));
        endpoint.key_var = key_var;
        let client: Arc<dyn ModelClient> = match provider {
            Provider::OpenaiCompatible => Arc::new(OpenAiClient::new(http.clone(), endpoint)),
            Provider::AnthropicCompatible => Arc::new(AnthropicClient::new(http.clone(), endpoint)),
            Provider::OllamaCompatible => Arc::new(OllamaClient::new(http.clone(), endpoint)),
            Provider::Scripted => continue,
        };
        backends.insert(entry.model.name(), client);
    }
    backends
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ResponseSchema;
    use crate::domain::ModelId;

    fn req() -> CompletionRequest {
        CompletionRequest {
            model: ModelId::new(Provider::AnthropicCompatible, "claude-opus-4-1").unwrap(),
            system_prompt: "be terse".into(),
            user_prompt: "note".into(),
            response_schema: ResponseSchema::Recommendation,
            timeout: Duration::from_secs(5),
            temperature: Some(0.2),
        }
    }

    #[test]
    fn request_bodies_carry_prompts_and_temperature() {
        let b = OpenAiClient::body(&req());
        assert_eq!(b["messages"][0]["content"], "be terse");
        assert_eq!(b["messages"][1]["role"], "user");
        assert!((b["temperature"].as_f64().unwrap() - 0.2).abs() < 1e-6);

        let b = AnthropicClient::body(&req());
        assert_eq!(b["system"], "be terse");
        assert_eq!(b["messages"].as_array().unwrap().len(), 1);

        let b = OllamaClient::body(&req());
        assert_eq!(b["stream"], false);
        assert!(b["options"]["temperature"].is_number());
    }

    #[test]
    fn reply_extraction() {
        let v = json!({"choices": [{"message": {"content": "hi"}}]});
        assert_eq!(OpenAiClient::extract(&v).unwrap(), "hi");
        let v = json!({"content": [{"type": "text", "text": "a"}, {"type": "tool_use"}, {"type": "text", "text": "b"}]});
        assert_eq!(AnthropicClient::extract(&v).unwrap(), "ab");
        let v = json!({"message": {"content": "local"}});
        assert_eq!(OllamaClient::extract(&v).unwrap(), "local");
        assert!(OllamaClient::extract(&json!({})).is_err());
    }

    #[test]
    fn ollama_host_without_scheme_gets_http() {
        let env = |k: &str| (k == "OLLAMA_HOST").then(|| "10.0.0.5:11434".to_string());
        assert_eq!(
            default_base_url(Provider::OllamaCompatible, &env),
            "http://10.0.0.5:11434"
        );
    }

    #[tokio::test]
    async fn missing_key_fails_without_network() {
        let client = AnthropicClient::new(
            reqwest::Client::new(),
            Endpoint::new("http://127.0.0.1:9", None),
        );
        assert!(matches!(
            client.call(&req()).await,
            Err(CallError::Transport { .. })
        ));
    }
}
