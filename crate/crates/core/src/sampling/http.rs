//! Client for OpenAI-compatible `/completions` endpoints.

use std::time::Duration;

use async_trait::async_trait;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};

use super::backend::{Backend, BackendError, BackendRequest, BackendResponse, Usage};

pub const API_KEY_ENV: &str = "COTLOOP_API_KEY";

#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    /// Sent as `model` when set.
    pub model: Option<String>,
    pub timeout: Duration,
}

impl HttpBackendConfig {
    /// Reads the API key from `COTLOOP_API_KEY`.
    pub fn from_env(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            model: None,
            timeout: Duration::from_secs(120),
        }
    }
}

#[derive(Debug, Serialize)]
struct CompletionBody<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
    prompt: &'a str,
    temperature: f64,
    n: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    logprobs: Option<u32>,
    max_tokens: u32,
    #[serde(skip_serializing_if = "<[String]>::is_empty")]
    stop: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    top_k: Option<u32>,
}

#[derive(Debug, Deserialize)]
struct CompletionReply {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<ReplyUsage>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    text: String,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Debug, Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
}

#[derive(Debug, Deserialize)]
struct ReplyUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Debug, Clone)]
pub struct HttpBackend {
    client: reqwest::Client,
    config: HttpBackendConfig,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, BackendError> {
        let client = reqwest::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Fatal(format!("building HTTP client: {e}")))?;
        Ok(Self { client, config })
    }

    fn endpoint(&self) -> String {
        format!("{}/completions", self.config.base_url.trim_end_matches('/'))
    }
}

fn retry_after(headers: &reqwest::header::HeaderMap) -> Option<Duration> {
    headers
        .get(reqwest::header::RETRY_AFTER)?
        .to_str()
        .ok()?
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|s| s.is_finite() && *s >= 0.0)
        .map(Duration::from_secs_f64)
}

#[async_trait]
impl Backend for HttpBackend {
    async fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let body = CompletionBody {
            model: self.config.model.as_deref(),
            prompt: &request.prompt,
            temperature: request.temperature,
            n: 1,
            logprobs: request.logprobs.then_some(1),
            max_tokens: request.max_tokens,
            stop: &request.stop,
            top_k: request.top_k,
        };
        let mut call = self.client.post(self.endpoint()).json(&body);
        if let Some(key) = &self.config.api_key {
            call = call.bearer_auth(key);
        }
        let reply = call.send().await.map_err(|e| {
            if e.is_timeout() || e.is_connect() || e.is_request() {
                BackendError::Transient(e.to_string())
            } else {
                BackendError::Fatal(e.to_string())
            }
        })?;
        let status = reply.status();
        if status == StatusCode::TOO_MANY_REQUESTS {
            return Err(BackendError::RateLimited { retry_after: retry_after(reply.headers()) });
        }
        if status.is_server_error() || status == StatusCode::REQUEST_TIMEOUT {
            return Err(BackendError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let detail = reply.text().await.unwrap_or_default();
            return Err(BackendError::Fatal(format!("HTTP {status}: {detail}")));
        }
        let parsed: CompletionReply =
            reply.json().await.map_err(|e| BackendError::Fatal(format!("malformed completion reply: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Fatal("completion reply has no choices".into()))?;
        // The first token of an echoed prompt may carry a null log-probability.
        let token_logprobs = choice
            .logprobs
            .map(|lp| lp.token_logprobs.into_iter().flatten().collect::<Vec<_>>())
            .filter(|lp| !lp.is_empty());
        let usage = parsed.usage.map_or_else(
            || Usage {
                prompt_tokens: 0,
                completion_tokens: token_logprobs
                    .as_ref()
                    .map_or_else(|| choice.text.split_whitespace().count() as u64, |lp| lp.len() as u64),
            },
            |u| Usage { prompt_tokens: u.prompt_tokens, completion_tokens: u.completion_tokens },
        );
        Ok(BackendResponse { text: choice.text, token_logprobs, usage })
    }
}
