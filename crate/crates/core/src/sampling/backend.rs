use std::time::Duration;

use async_trait::async_trait;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Why a completion is requested. Replay fixtures key on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Sampling (or the single greedy decode) of a fresh rationale.
    #[default]
    Sample,
    /// Greedy continuation of a human-corrected rationale.
    Answer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRequest {
    pub sample_id: String,
    pub index: usize,
    pub stage: Stage,
    pub prompt: String,
    /// Zero requests greedy decoding.
    pub temperature: f64,
    pub top_k: Option<u32>,
    pub max_tokens: u32,
    pub stop: Vec<String>,
    pub logprobs: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendResponse {
    pub text: String,
    pub token_logprobs: Option<Vec<f64>>,
    pub usage: Usage,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("rate limited")]
    RateLimited { retry_after: Option<Duration> },
    #[error("transient backend failure: {0}")]
    Transient(String),
    #[error("backend failure: {0}")]
    Fatal(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        !matches!(self, BackendError::Fatal(_))
    }
}

/// A language model that turns prompts into completions.
///
/// Implementations must tolerate concurrent calls.
#[async_trait]
pub trait Backend: Send + Sync {
    async fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError>;
}

#[async_trait]
impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    async fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        (**self).complete(request).await
    }
}

/// Exponential backoff with jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub max_attempts: u32,
    #[serde(with = "millis")]
    pub base_delay: Duration,
    #[serde(with = "millis")]
    pub max_delay: Duration,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, base_delay: Duration::from_secs(1), max_delay: Duration::from_secs(30), jitter: true }
    }
}

impl RetryPolicy {
    /// No waiting between attempts; for tests and replay runs.
    pub fn immediate(max_attempts: u32) -> Self {
        Self { max_attempts, base_delay: Duration::ZERO, max_delay: Duration::ZERO, jitter: false }
    }

    /// Delay before retry number `retry` (1-based).
    pub fn delay(&self, retry: u32, error: &BackendError) -> Duration {
        let exp = self.base_delay.saturating_mul(1u32 << retry.saturating_sub(1).min(16)).min(self.max_delay);
        let backoff =
            if self.jitter && !exp.is_zero() { exp.mul_f64(rand::rng().random_range(0.5..=1.0)) } else { exp };
        match error {
            BackendError::RateLimited { retry_after: Some(after) } => {
                backoff.max(*after).min(self.max_delay.max(*after))
            }
            _ => backoff,
        }
    }
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}
