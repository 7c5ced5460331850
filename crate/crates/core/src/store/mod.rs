//! Dataset ingestion and flat-file run persistence.
//!
//! Each run lives in its own directory:
//!
//! ```text
//! <root>/<run_id>/events.jsonl   append-only, checksummed event log
//! <root>/<run_id>/config.json    config snapshot taken at run start
//! <root>/<run_id>/report.json    deterministic summary, rewritten on demand
//! ```
//!
//! The event log is the source of truth; [`RunRecord`] is a fold over it.

mod dataset;
mod events;
mod record;

pub use dataset::{ingest_dataset, question_id};
pub use events::{read_events, EventLog};
pub use record::{
    median, median_accuracy, AnswerSource, AnswerStageRecord, RunRecord, RunReport, RunStatus, SampleOutcome,
    SampleRecord,
};

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::CorrectionPolicy;
use crate::camlop::GoodsPricing;
use crate::correction::CorrectionSession;
use crate::domain::{AnswerDistribution, AnswerFormat, AnswerValue, DiversityScore, Rationale, Sample, Strategy, Vote};
use crate::sampling::SamplingConfig;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}, line {line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error("corrupt event log {path}, line {line}: {reason}")]
    CorruptLog { path: PathBuf, line: usize, reason: String },
    #[error("unknown run {0}")]
    UnknownRun(String),
    #[error("event log of run {run_id}: {reason}")]
    Inconsistent { run_id: String, reason: String },
    #[error("serialization failed: {0}")]
    Serialize(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// One greedy decode per sample.
    Cot,
    /// `n` sampled decodes, majority vote.
    SelfConsistency,
    /// Sample, rank by entropy, correct the top fraction, answer again.
    Mcs,
    /// Like `Mcs`, but the rationale sent for correction is one that
    /// supports the self-consistency winner.
    McsSc,
}

impl RunMode {
    pub fn corrects(self) -> bool {
        matches!(self, RunMode::Mcs | RunMode::McsSc)
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunMode::Cot => "cot",
            RunMode::SelfConsistency => "self_consistency",
            RunMode::Mcs => "mcs",
            RunMode::McsSc => "mcs_sc",
        })
    }
}

impl std::str::FromStr for RunMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "cot" => Ok(RunMode::Cot),
            "self_consistency" | "sc" => Ok(RunMode::SelfConsistency),
            "mcs" => Ok(RunMode::Mcs),
            "mcs_sc" => Ok(RunMode::McsSc),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

/// Final answer of a sample that is not sent to a human.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Uncorrected {
    /// Winner of the configured aggregation strategy.
    #[default]
    Modal,
    /// Answer of the first sampled decode.
    First,
}

impl std::str::FromStr for Uncorrected {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "modal" => Ok(Uncorrected::Modal),
            "first" => Ok(Uncorrected::First),
            other => Err(format!("unknown uncorrected policy {other:?}")),
        }
    }
}

/// Everything that determines a run's outcome, frozen at run start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: RunMode,
    pub sampling: SamplingConfig,
    /// Fraction of samples routed to correction.
    pub alpha: f64,
    pub strategy: Strategy,
    pub policy: CorrectionPolicy,
    pub uncorrected: Uncorrected,
    /// Skip the answer-stage decode when the corrected text already states
    /// an answer.
    pub no_redecode: bool,
    pub answer_format: AnswerFormat,
    pub prompt_set: String,
    pub pricing: GoodsPricing,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: RunMode::Mcs,
            sampling: SamplingConfig::default(),
            alpha: 0.4,
            strategy: Strategy::Uus,
            policy: CorrectionPolicy::default(),
            uncorrected: Uncorrected::default(),
            no_redecode: false,
            answer_format: AnswerFormat::default(),
            prompt_set: "arithmetic".into(),
            pricing: GoodsPricing::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RunEvent {
    RunStarted {
        run_id: String,
        task: String,
        config: RunConfig,
    },
    SampleAdded {
        sample: Sample,
    },
    RationalesSampled {
        sample_id: String,
        rationales: Vec<Rationale>,
    },
    Scored {
        sample_id: String,
        distribution: AnswerDistribution,
        entropy: DiversityScore,
        winner: Option<Vote>,
    },
    /// `rank` is the 0-based position in the correction queue.
    Queued {
        sample_id: String,
        rank: usize,
        rationale_index: usize,
    },
    CorrectionApplied {
        session: CorrectionSession,
    },
    AnswerDecoded {
        sample_id: String,
        text: String,
        answer: Option<AnswerValue>,
        backend_call: bool,
    },
    Finalized {
        sample_id: String,
        answer: Vote,
        source: AnswerSource,
    },
    RunSuspended {
        pending: Vec<String>,
    },
    RunCompleted,
    RunFailed {
        reason: String,
    },
}

/// Directory of runs.
#[derive(Debug, Clone)]
pub struct RunStore {
    root: PathBuf,
}

impl RunStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join(run_id)
    }

    /// Creates the run directory, snapshots the config and logs `RunStarted`.
    pub fn create_run(&self, run_id: &str, task: &str, config: &RunConfig) -> Result<EventLog, StoreError> {
        let dir = self.run_dir(run_id);
        std::fs::create_dir_all(&dir).map_err(|source| StoreError::Io { path: dir.clone(), source })?;
        let log = EventLog::open(dir.join("events.jsonl"));
        if log.path().exists() {
            return Err(StoreError::Inconsistent { run_id: run_id.into(), reason: "run already exists".into() });
        }
        write_json(&dir.join("config.json"), config)?;
        log.append(&RunEvent::RunStarted { run_id: run_id.into(), task: task.into(), config: config.clone() })?;
        Ok(log)
    }

    pub fn events(&self, run_id: &str) -> Result<EventLog, StoreError> {
        let path = self.run_dir(run_id).join("events.jsonl");
        if !is_safe_id(run_id) || !path.is_file() {
            return Err(StoreError::UnknownRun(run_id.into()));
        }
        Ok(EventLog::open(path))
    }

    pub fn load_run(&self, run_id: &str) -> Result<RunRecord, StoreError> {
        RunRecord::fold(self.events(run_id)?.read()?)
    }

    /// Writes `report.json` for a run and returns it.
    pub fn write_report(&self, record: &RunRecord) -> Result<RunReport, StoreError> {
        let report = record.report();
        write_json(&self.run_dir(&record.run_id).join("report.json"), &report)?;
        Ok(report)
    }

    /// Run ids with an event log, sorted.
    pub fn list_runs(&self) -> Result<Vec<String>, StoreError> {
        let entries = match std::fs::read_dir(&self.root) {
            Ok(entries) => entries,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(source) => return Err(StoreError::Io { path: self.root.clone(), source }),
        };
        let mut ids: Vec<String> = entries
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("events.jsonl").is_file())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        ids.sort();
        Ok(ids)
    }
}

fn is_safe_id(run_id: &str) -> bool {
    !run_id.is_empty() && run_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| StoreError::Serialize(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|source| StoreError::Io { path: path.to_path_buf(), source })
}
