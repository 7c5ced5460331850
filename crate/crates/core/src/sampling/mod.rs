//! Prompt construction, rationale sampling against a pluggable backend, and
//! answer extraction.

mod backend;
mod extract;
mod http;
mod prompt;
mod replay;

pub use backend::{Backend, BackendError, BackendRequest, BackendResponse, RetryPolicy, Stage, Usage};
pub use extract::{extract_answer, has_answer_marker, ANSWER_MARKER};
pub use http::{HttpBackend, HttpBackendConfig, API_KEY_ENV};
pub use prompt::{build_prompt, Exemplar, PromptError, PromptSet, ARITHMETIC_EXEMPLARS};
pub use replay::{ReplayBackend, ReplayRecord};

use futures::stream::{self, StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correction::segment_sublogics;
use crate::domain::{AnswerFormat, Rationale};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplingError {
    #[error("sample {sample_id} index {index}: backend exhausted after {attempts} attempts: {last_error}")]
    BackendExhausted { sample_id: String, index: usize, attempts: u32, last_error: BackendError },
    #[error("sample {sample_id} index {index}: {error}")]
    Backend { sample_id: String, index: usize, error: BackendError },
    #[error("invalid sampling config: {0}")]
    InvalidConfig(String),
    #[error("replay fixture {path}, line {line}: {reason}")]
    Fixture { path: String, line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub n: usize,
    pub temperature: f64,
    #[serde(default)]
    pub top_k: Option<u32>,
    /// One deterministic completion; `temperature` and `n` are ignored.
    #[serde(default)]
    pub greedy: bool,
    pub max_tokens: u32,
    /// Token budget for the answer-stage continuation of a corrected rationale.
    pub answer_max_tokens: u32,
    pub stop: Vec<String>,
    pub logprobs: bool,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n: 5,
            temperature: 0.7,
            top_k: None,
            greedy: false,
            max_tokens: 256,
            answer_max_tokens: 64,
            stop: vec!["\nQ:".to_string()],
            logprobs: true,
            max_in_flight: 4,
            retry: RetryPolicy::default(),
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), SamplingError> {
        if self.n == 0 {
            return Err(SamplingError::InvalidConfig("n must be at least 1".into()));
        }
        if self.max_in_flight == 0 {
            return Err(SamplingError::InvalidConfig("max_in_flight must be at least 1".into()));
        }
        if self.retry.max_attempts == 0 {
            return Err(SamplingError::InvalidConfig("retry budget must allow one attempt".into()));
        }
        if !self.greedy && !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(SamplingError::InvalidConfig(format!("bad temperature {}", self.temperature)));
        }
        Ok(())
    }

    /// Number of completions one sample needs.
    pub fn completions(&self) -> usize {
        if self.greedy {
            1
        } else {
            self.n
        }
    }

    pub fn request(&self, sample_id: &str, index: usize, prompt: &str) -> BackendRequest {
        BackendRequest {
            sample_id: sample_id.to_string(),
            index,
            stage: Stage::Sample,
            prompt: prompt.to_string(),
            temperature: if self.greedy { 0.0 } else { self.temperature },
            top_k: if self.greedy { None } else { self.top_k },
            max_tokens: self.max_tokens,
            stop: self.stop.clone(),
            logprobs: self.logprobs,
        }
    }

    /// Greedy continuation request for a corrected rationale.
    pub fn answer_request(&self, sample_id: &str, index: usize, prompt: &str) -> BackendRequest {
        BackendRequest {
            stage: Stage::Answer,
            temperature: 0.0,
            top_k: None,
            max_tokens: self.answer_max_tokens,
            ..self.request(sample_id, index, prompt)
        }
    }
}

/// Segments and answer-extracts one completion.
pub fn build_rationale(
    sample_id: &str,
    index: usize,
    text: &str,
    token_logprobs: Option<Vec<f64>>,
    format: &AnswerFormat,
) -> Rationale {
    let raw_text = text.trim().to_string();
    Rationale {
        sample_id: sample_id.to_string(),
        index,
        sublogics: segment_sublogics(&raw_text),
        answer: extract_answer(&raw_text, format),
        raw_text,
        token_logprobs: None,
        unnormalized_prob: None,
        normalized_prob: None,
    }
    .with_logprobs(token_logprobs)
}

/// Issues one request, retrying retryable failures under `policy`.
pub async fn complete_with_retry<B: Backend + ?Sized>(
    backend: &B,
    request: &BackendRequest,
    policy: &RetryPolicy,
) -> Result<BackendResponse, SamplingError> {
    let mut attempt = 0;
    loop {
        attempt += 1;
        let error = match backend.complete(request).await {
            Ok(resp) if resp.usage.completion_tokens > 0 => return Ok(resp),
            Ok(_) => BackendError::Transient("empty completion".into()),
            Err(e) => e,
        };
        if !error.is_retryable() {
            return Err(SamplingError::Backend { sample_id: request.sample_id.clone(), index: request.index, error });
        }
        if attempt >= policy.max_attempts {
            return Err(SamplingError::BackendExhausted {
                sample_id: request.sample_id.clone(),
                index: request.index,
                attempts: attempt,
                last_error: error,
            });
        }
        let wait = policy.delay(attempt, &error);
        tracing::debug!(sample = %request.sample_id, index = request.index, attempt, ?wait, %error, "retrying");
        if !wait.is_zero() {
            tokio::time::sleep(wait).await;
        }
    }
}

/// Draws `config.completions()` rationales for one prompt.
///
/// Up to `max_in_flight` requests run concurrently; the result is always in
/// request-index order.
pub async fn sample_rationales<B: Backend + ?Sized>(
    backend: &B,
    sample_id: &str,
    prompt: &str,
    config: &SamplingConfig,
    format: &AnswerFormat,
) -> Result<Vec<Rationale>, SamplingError> {
    config.validate()?;
    stream::iter(0..config.completions())
        .map(|index| async move {
            let request = config.request(sample_id, index, prompt);
            let resp = complete_with_retry(backend, &request, &config.retry).await?;
            Ok::<_, SamplingError>(build_rationale(sample_id, index, &resp.text, resp.token_logprobs, format))
        })
        .buffered(config.max_in_flight)
        .try_collect()
        .await
}
