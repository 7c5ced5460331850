use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{RunConfig, RunEvent, RunMode, StoreError};
use crate::correction::CorrectionSession;
use crate::domain::{AnswerDistribution, AnswerValue, DiversityScore, Rationale, Sample, Strategy, Vote};

/// Where a final answer came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerSource {
    /// Winner of the aggregated sampled answers.
    Aggregate,
    /// Answer of the first sampled decode.
    FirstDecode,
    /// Answer after human correction.
    AnswerStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerStageRecord {
    pub text: String,
    pub answer: Option<AnswerValue>,
    /// False when the corrected rationale already stated the answer.
    pub backend_call: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample: Sample,
    pub rationales: Vec<Rationale>,
    pub distribution: Option<AnswerDistribution>,
    pub entropy: Option<DiversityScore>,
    /// Aggregation winner before any correction.
    pub initial_answer: Option<Vote>,
    pub queue_rank: Option<usize>,
    /// Rationale handed to the operator.
    pub correction_rationale: Option<usize>,
    pub session: Option<CorrectionSession>,
    pub answer_stage: Option<AnswerStageRecord>,
    pub final_answer: Option<Vote>,
    pub source: Option<AnswerSource>,
}

impl SampleRecord {
    fn new(sample: Sample) -> Self {
        Self {
            sample,
            rationales: Vec::new(),
            distribution: None,
            entropy: None,
            initial_answer: None,
            queue_rank: None,
            correction_rationale: None,
            session: None,
            answer_stage: None,
            final_answer: None,
            source: None,
        }
    }

    pub fn selected(&self) -> bool {
        self.queue_rank.is_some()
    }

    /// Queued and still waiting for a correction.
    pub fn pending(&self) -> bool {
        self.selected() && self.final_answer.is_none()
    }

    /// Exact match against the gold answer; `None` without gold.
    pub fn correct(&self) -> Option<bool> {
        let gold = self.sample.gold_answer.as_ref()?;
        Some(matches!(&self.final_answer, Some(Vote::Answer(a)) if a == gold))
    }

    /// Whether the pre-correction answer was right; `None` without gold.
    pub fn initially_correct(&self) -> Option<bool> {
        let gold = self.sample.gold_answer.as_ref()?;
        Some(matches!(&self.initial_answer, Some(Vote::Answer(a)) if a == gold))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Suspended { pending: Vec<String> },
    Completed,
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub task: String,
    pub config: RunConfig,
    pub status: RunStatus,
    /// In ingestion order.
    pub samples: Vec<SampleRecord>,
    pub events: usize,
}

impl RunRecord {
    /// Rebuilds a run from its event log. The first event must be `RunStarted`.
    pub fn fold(events: Vec<RunEvent>) -> Result<Self, StoreError> {
        let mut iter = events.into_iter();
        let mut record = match iter.next() {
            Some(RunEvent::RunStarted { run_id, task, config }) => {
                RunRecord { run_id, task, config, status: RunStatus::Running, samples: Vec::new(), events: 1 }
            }
            _ => {
                return Err(StoreError::Inconsistent {
                    run_id: String::new(),
                    reason: "log does not begin with run_started".into(),
                })
            }
        };
        let mut index: HashMap<String, usize> = HashMap::new();
        for event in iter {
            record.events += 1;
            record.apply(event, &mut index)?;
        }
        Ok(record)
    }

    fn apply(&mut self, event: RunEvent, index: &mut HashMap<String, usize>) -> Result<(), StoreError> {
        let run_id = self.run_id.clone();
        let inconsistent = |reason: String| StoreError::Inconsistent { run_id: run_id.clone(), reason };
        match event {
            RunEvent::RunStarted { .. } => return Err(inconsistent("second run_started".into())),
            RunEvent::SampleAdded { sample } => {
                if index.contains_key(&sample.id) {
                    return Err(inconsistent(format!("sample {:?} added twice", sample.id)));
                }
                index.insert(sample.id.clone(), self.samples.len());
                self.samples.push(SampleRecord::new(sample));
            }
            RunEvent::RationalesSampled { sample_id, rationales } => {
                slot(&mut self.samples, index, &self.run_id, &sample_id)?.rationales = rationales
            }
            RunEvent::Scored { sample_id, distribution, entropy, winner } => {
                let s = slot(&mut self.samples, index, &self.run_id, &sample_id)?;
                s.distribution = Some(distribution);
                s.entropy = Some(entropy);
                s.initial_answer = winner;
            }
            RunEvent::Queued { sample_id, rank, rationale_index } => {
                let s = slot(&mut self.samples, index, &self.run_id, &sample_id)?;
                s.queue_rank = Some(rank);
                s.correction_rationale = Some(rationale_index);
            }
            RunEvent::CorrectionApplied { session } => {
                let s = slot(&mut self.samples, index, &self.run_id, &session.sample_id)?;
                s.session = Some(session);
            }
            RunEvent::AnswerDecoded { sample_id, text, answer, backend_call } => {
                slot(&mut self.samples, index, &self.run_id, &sample_id)?.answer_stage =
                    Some(AnswerStageRecord { text, answer, backend_call });
            }
            RunEvent::Finalized { sample_id, answer, source } => {
                let s = slot(&mut self.samples, index, &self.run_id, &sample_id)?;
                s.final_answer = Some(answer);
                s.source = Some(source);
            }
            RunEvent::RunSuspended { pending } => self.status = RunStatus::Suspended { pending },
            RunEvent::RunCompleted => self.status = RunStatus::Completed,
            RunEvent::RunFailed { reason } => self.status = RunStatus::Failed { reason },
        }
        Ok(())
    }

    pub fn sample(&self, sample_id: &str) -> Option<&SampleRecord> {
        self.samples.iter().find(|s| s.sample.id == sample_id)
    }

    /// Queued samples in queue order.
    pub fn queue(&self) -> Vec<&SampleRecord> {
        let mut queued: Vec<&SampleRecord> = self.samples.iter().filter(|s| s.selected()).collect();
        queued.sort_by_key(|s| s.queue_rank);
        queued
    }

    pub fn pending_ids(&self) -> Vec<String> {
        self.queue().into_iter().filter(|s| s.pending()).map(|s| s.sample.id.clone()).collect()
    }

    /// Summary of the run. Contains no run id or timestamps, so identical
    /// inputs give identical reports.
    pub fn report(&self) -> RunReport {
        let samples: Vec<SampleOutcome> = self
            .samples
            .iter()
            .map(|s| SampleOutcome {
                sample_id: s.sample.id.clone(),
                gold: s.sample.gold_answer.clone(),
                entropy: s.entropy.map(|e| e.value),
                votes: s
                    .distribution
                    .as_ref()
                    .map(|d| d.entries.iter().map(|e| (e.vote.to_string(), e.count)).collect())
                    .unwrap_or_default(),
                initial_answer: s.initial_answer.clone(),
                queue_rank: s.queue_rank,
                corrected: s.session.is_some(),
                final_answer: s.final_answer.clone(),
                source: s.source,
                pending: s.pending(),
                correct: s.correct(),
            })
            .collect();
        let graded = samples.iter().filter(|s| s.correct.is_some()).count();
        let correct = samples.iter().filter(|s| s.correct == Some(true)).count();
        RunReport {
            task: self.task.clone(),
            mode: self.config.mode,
            strategy: self.config.strategy,
            n: if self.config.mode == RunMode::Cot { 1 } else { self.config.sampling.completions() },
            alpha: self.config.alpha,
            total: samples.len(),
            answered: samples.iter().filter(|s| matches!(s.final_answer, Some(Vote::Answer(_)))).count(),
            graded,
            correct,
            accuracy: (graded > 0).then(|| correct as f64 / graded as f64),
            queued: samples.iter().filter(|s| s.queue_rank.is_some()).count(),
            corrected: samples.iter().filter(|s| s.corrected).count(),
            pending: samples.iter().filter(|s| s.pending).count(),
            completed: self.status == RunStatus::Completed,
            samples,
        }
    }
}

fn slot<'a>(
    samples: &'a mut [SampleRecord],
    index: &HashMap<String, usize>,
    run_id: &str,
    id: &str,
) -> Result<&'a mut SampleRecord, StoreError> {
    let i = index.get(id).copied().ok_or_else(|| StoreError::Inconsistent {
        run_id: run_id.to_string(),
        reason: format!("event for unknown sample {id:?}"),
    })?;
    Ok(&mut samples[i])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub sample_id: String,
    pub gold: Option<AnswerValue>,
    pub entropy: Option<f64>,
    /// `(answer, count)` in order of first appearance.
    pub votes: Vec<(String, usize)>,
    pub initial_answer: Option<Vote>,
    pub queue_rank: Option<usize>,
    pub corrected: bool,
    pub final_answer: Option<Vote>,
    pub source: Option<AnswerSource>,
    pub pending: bool,
    pub correct: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task: String,
    pub mode: RunMode,
    pub strategy: Strategy,
    pub n: usize,
    pub alpha: f64,
    pub total: usize,
    pub answered: usize,
    /// Samples with a gold answer. Pending samples count as wrong.
    pub graded: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
    pub queued: usize,
    pub corrected: usize,
    pub pending: usize,
    pub completed: bool,
    pub samples: Vec<SampleOutcome>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { (v[mid - 1] + v[mid]) / 2.0 })
}

/// Median accuracy across several runs of the same configuration.
pub fn median_accuracy(reports: &[RunReport]) -> Option<f64> {
    median(&reports.iter().filter_map(|r| r.accuracy).collect::<Vec<_>>())
}
