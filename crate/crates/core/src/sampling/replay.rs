//! Deterministic backend that replays canned completions from a fixture.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::backend::{Backend, BackendError, BackendRequest, BackendResponse, Stage, Usage};
use super::SamplingError;

/// One fixture line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub sample_id: String,
    pub index: usize,
    pub completion: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
    /// Defaults to `sample`; `answer` records continue a corrected rationale.
    #[serde(default, skip_serializing_if = "is_sample_stage")]
    pub stage: Stage,
}

fn is_sample_stage(stage: &Stage) -> bool {
    *stage == Stage::Sample
}

/// Greedy requests use index 0, so a CoT run replays the first sampled
/// completion of each sample.
#[derive(Debug, Default)]
pub struct ReplayBackend {
    records: HashMap<(String, Stage, usize), ReplayRecord>,
    calls: AtomicUsize,
}

impl ReplayBackend {
    pub fn from_records(records: impl IntoIterator<Item = ReplayRecord>) -> Self {
        let records = records.into_iter().map(|r| ((r.sample_id.clone(), r.stage, r.index), r)).collect();
        Self { records, calls: AtomicUsize::new(0) }
    }

    pub fn load(path: &Path) -> Result<Self, SamplingError> {
        let fixture =
            |line: usize, reason: String| SamplingError::Fixture { path: path.display().to_string(), line, reason };
        let file = File::open(path).map_err(|e| fixture(0, e.to_string()))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| fixture(i + 1, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| fixture(i + 1, e.to_string()))?);
        }
        Ok(Self::from_records(records))
    }

    /// Number of `complete` calls served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[async_trait]
impl Backend for ReplayBackend {
    async fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let key = (request.sample_id.clone(), request.stage, request.index);
        let record = self.records.get(&key).ok_or_else(|| {
            BackendError::Fatal(format!(
                "no replay record for sample {:?} stage {:?} index {}",
                request.sample_id, request.stage, request.index
            ))
        })?;
        let completion_tokens = match &record.token_logprobs {
            Some(lp) => lp.len() as u64,
            None => record.completion.split_whitespace().count() as u64,
        };
        Ok(BackendResponse {
            text: record.completion.clone(),
            token_logprobs: if request.logprobs { record.token_logprobs.clone() } else { None },
            usage: Usage { prompt_tokens: request.prompt.split_whitespace().count() as u64, completion_tokens },
        })
    }
}
