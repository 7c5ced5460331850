//! Orchestration of the four stages: sample, filter, correct, answer.
//!
//! All state lives in the run's event log. A run that needs human input is
//! left suspended with its queued samples pending; [`Pipeline::submit`]
//! resumes one sample at a time, and [`Pipeline::execute`] picks up where a
//! previous process stopped.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use cotloop_core::aggregation::{
    aggregate, rationale_for_correction, winning_answer, AggregationError, CorrectionPolicy,
};
use cotloop_core::correction::{edited_prefix_len, join_sublogics, CorrectionError, CorrectionOp, CorrectionSession};
use cotloop_core::domain::{Rationale, Sample, Strategy, Vote};
use cotloop_core::filtering::{entropy_of_votes, select_indices, FilterConfig, FilterError};
use cotloop_core::sampling::{
    build_prompt, complete_with_retry, extract_answer, has_answer_marker, sample_rationales, Backend, PromptSet,
    SamplingConfig, SamplingError,
};
use cotloop_core::store::{
    AnswerSource, EventLog, RunConfig, RunEvent, RunMode, RunRecord, RunStore, SampleRecord, StoreError, Uncorrected,
};
use futures::stream::{self, StreamExt};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Correction(#[from] CorrectionError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("unknown prompt set {0:?}")]
    UnknownPromptSet(String),
    #[error("unknown sample {0:?}")]
    UnknownSample(String),
    #[error("sample {0:?} is not queued for correction")]
    NotQueued(String),
    #[error("sample {0:?} has already been corrected")]
    AlreadyCorrected(String),
}

pub struct Pipeline {
    pub store: RunStore,
    pub backend: Arc<dyn Backend>,
    prompts: HashMap<String, PromptSet>,
    /// Samples in flight at once; each may issue `max_in_flight` requests.
    pub workers: usize,
}

impl Pipeline {
    pub fn new(store: RunStore, backend: Arc<dyn Backend>) -> Self {
        let arithmetic = PromptSet::arithmetic();
        Self { store, backend, prompts: HashMap::from([(arithmetic.id.clone(), arithmetic)]), workers: 4 }
    }

    pub fn with_prompt_set(mut self, set: PromptSet) -> Self {
        self.prompts.insert(set.id.clone(), set);
        self
    }

    fn prompt_set(&self, id: &str) -> Result<&PromptSet, PipelineError> {
        self.prompts.get(id).ok_or_else(|| PipelineError::UnknownPromptSet(id.to_string()))
    }

    pub fn validate(&self, config: &RunConfig) -> Result<(), PipelineError> {
        config.sampling.validate()?;
        if !(0.0..=1.0).contains(&config.alpha) {
            return Err(PipelineError::InvalidConfig(format!("alpha must lie in [0, 1], got {}", config.alpha)));
        }
        config.pricing.validate().map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        if self.workers == 0 {
            return Err(PipelineError::InvalidConfig("workers must be at least 1".into()));
        }
        self.prompt_set(&config.prompt_set)?;
        Ok(())
    }

    /// Creates a run and records its samples without contacting the backend.
    pub fn start(&self, run_id: &str, task: &str, samples: &[Sample], config: &RunConfig) -> Result<(), PipelineError> {
        self.validate(config)?;
        let log = self.store.create_run(run_id, task, config)?;
        for sample in samples {
            log.append(&RunEvent::SampleAdded { sample: sample.clone() })?;
        }
        Ok(())
    }

    /// Creates a run and drives it as far as `corrections` allow.
    pub async fn run_pipeline(
        &self,
        run_id: &str,
        task: &str,
        samples: &[Sample],
        config: &RunConfig,
        corrections: &BTreeMap<String, CorrectionSession>,
    ) -> Result<RunRecord, PipelineError> {
        self.start(run_id, task, samples, config)?;
        self.execute(run_id, corrections).await
    }

    /// Runs every stage that has not happened yet. Queued samples with a
    /// session in `corrections` are resolved; the rest stay pending.
    pub async fn execute(
        &self,
        run_id: &str,
        corrections: &BTreeMap<String, CorrectionSession>,
    ) -> Result<RunRecord, PipelineError> {
        let log = self.store.events(run_id)?;
        let result = self.drive(run_id, &log, corrections).await;
        if let Err(e) = &result {
            log.append(&RunEvent::RunFailed { reason: e.to_string() })?;
        }
        result
    }

    async fn drive(
        &self,
        run_id: &str,
        log: &EventLog,
        corrections: &BTreeMap<String, CorrectionSession>,
    ) -> Result<RunRecord, PipelineError> {
        let record = self.store.load_run(run_id)?;
        let config = record.config.clone();
        self.validate(&config)?;
        self.sample_all(&record, log).await?;

        let record = self.store.load_run(run_id)?;
        let selection_done = record.samples.iter().any(|s| s.queue_rank.is_some() || s.final_answer.is_some());
        if !selection_done {
            self.select(&record, log)?;
        }

        let record = self.store.load_run(run_id)?;
        for item in record.queue() {
            if !item.pending() {
                continue;
            }
            if let Some(session) = corrections.get(&item.sample.id) {
                let session = self.verified_session(item, session)?;
                self.resolve(&record.config, item, session, log).await?;
            }
        }
        for id in corrections.keys().filter(|id| record.sample(id).is_none_or(|s| !s.selected())) {
            tracing::warn!(sample = %id, "ignoring correction for a sample that is not queued");
        }
        self.finish(run_id, log)
    }

    fn sampling_config(config: &RunConfig) -> SamplingConfig {
        match config.mode {
            RunMode::Cot => SamplingConfig { greedy: true, ..config.sampling.clone() },
            _ => config.sampling.clone(),
        }
    }

    async fn sample_all(&self, record: &RunRecord, log: &EventLog) -> Result<(), PipelineError> {
        let config = &record.config;
        let sampling = Self::sampling_config(config);
        let prompt_set = self.prompt_set(&config.prompt_set)?;
        let strategy = if config.mode == RunMode::Cot { Strategy::Uus } else { config.strategy };
        // Collected so no closure types are held across awaits.
        let jobs: Vec<_> = record
            .samples
            .iter()
            .filter(|s| s.distribution.is_none())
            .map(|s| self.rationales_for(s, prompt_set, &sampling, config))
            .collect();
        let mut results = stream::iter(jobs).buffered(self.workers);
        while let Some(next) = results.next().await {
            let (s, rationales) = next?;
            let id = s.sample.id.clone();
            if s.rationales.is_empty() {
                log.append(&RunEvent::RationalesSampled { sample_id: id.clone(), rationales: rationales.clone() })?;
            }
            let votes: Vec<Vote> = rationales.iter().map(|r| r.vote()).collect();
            let entropy = entropy_of_votes(&votes)?;
            let distribution = aggregate(&rationales, strategy)?;
            let winner = winning_answer(&distribution).map(|w| w.vote.clone());
            log.append(&RunEvent::Scored { sample_id: id, distribution, entropy, winner })?;
        }
        Ok(())
    }

    async fn rationales_for<'a>(
        &self,
        s: &'a SampleRecord,
        prompt_set: &PromptSet,
        sampling: &SamplingConfig,
        config: &RunConfig,
    ) -> Result<(&'a SampleRecord, Vec<Rationale>), PipelineError> {
        if !s.rationales.is_empty() {
            return Ok((s, s.rationales.clone()));
        }
        let prompt = build_prompt(prompt_set, &s.sample, None);
        let rationales =
            sample_rationales(&*self.backend, &s.sample.id, &prompt, sampling, &config.answer_format).await?;
        Ok((s, rationales))
    }

    /// Queues the top fraction and finalizes everything else.
    fn select(&self, record: &RunRecord, log: &EventLog) -> Result<(), PipelineError> {
        let config = &record.config;
        let queued: Vec<usize> = if config.mode.corrects() {
            let scored: Vec<(&str, _)> = record
                .samples
                .iter()
                .map(|s| (s.sample.id.as_str(), s.entropy.expect("scored before selection")))
                .collect();
            select_indices(&scored, &FilterConfig::top_fraction(config.alpha)?)
        } else {
            Vec::new()
        };
        let policy = match config.mode {
            RunMode::McsSc => CorrectionPolicy::ModalAnswerFirst,
            _ => config.policy,
        };
        for (rank, &i) in queued.iter().enumerate() {
            let s = &record.samples[i];
            let chosen = rationale_for_correction(&s.rationales, policy)?;
            log.append(&RunEvent::Queued { sample_id: s.sample.id.clone(), rank, rationale_index: chosen.index })?;
        }
        for (i, s) in record.samples.iter().enumerate() {
            if queued.contains(&i) {
                continue;
            }
            let (answer, source) = match (config.mode, config.uncorrected) {
                (RunMode::Mcs | RunMode::McsSc, Uncorrected::First) => {
                    (s.rationales.first().map_or(Vote::NoAnswer, |r| r.vote()), AnswerSource::FirstDecode)
                }
                _ => (s.initial_answer.clone().unwrap_or(Vote::NoAnswer), AnswerSource::Aggregate),
            };
            log.append(&RunEvent::Finalized { sample_id: s.sample.id.clone(), answer, source })?;
        }
        Ok(())
    }

    fn verified_session(
        &self,
        item: &SampleRecord,
        session: &CorrectionSession,
    ) -> Result<CorrectionSession, PipelineError> {
        let rationale = item.rationales.iter().find(|r| r.index == session.rationale_index).ok_or(
            CorrectionError::IndexOutOfBounds { op: 0, index: session.rationale_index, len: item.rationales.len() },
        )?;
        session.verify(&rationale.sublogics)?;
        Ok(session.clone())
    }

    /// Records the session, re-prompts with the corrected prefix and
    /// finalizes the sample.
    async fn resolve(
        &self,
        config: &RunConfig,
        item: &SampleRecord,
        session: CorrectionSession,
        log: &EventLog,
    ) -> Result<(), PipelineError> {
        let sample_id = item.sample.id.clone();
        let keep = edited_prefix_len(&session.ops).unwrap_or(session.resulting_sublogics.len());
        let prefix = &session.resulting_sublogics[..keep.min(session.resulting_sublogics.len())];
        let prefix_text = join_sublogics(prefix);
        let index = session.rationale_index;
        log.append(&RunEvent::CorrectionApplied { session: session.clone() })?;

        let (text, backend_call) = if config.no_redecode && has_answer_marker(&prefix_text) {
            (prefix_text, false)
        } else {
            let prompt = build_prompt(self.prompt_set(&config.prompt_set)?, &item.sample, Some(prefix));
            let request = config.sampling.answer_request(&sample_id, index, &prompt);
            let reply = complete_with_retry(&*self.backend, &request, &config.sampling.retry).await?;
            let continuation = reply.text.trim();
            let text = match (prefix_text.is_empty(), continuation.is_empty()) {
                (true, _) => continuation.to_string(),
                (false, true) => prefix_text,
                (false, false) => format!("{prefix_text} {continuation}"),
            };
            (text, true)
        };
        let answer = extract_answer(&text, &config.answer_format);
        log.append(&RunEvent::AnswerDecoded {
            sample_id: sample_id.clone(),
            text,
            answer: answer.clone(),
            backend_call,
        })?;
        log.append(&RunEvent::Finalized { sample_id, answer: answer.into(), source: AnswerSource::AnswerStage })?;
        Ok(())
    }

    fn finish(&self, run_id: &str, log: &EventLog) -> Result<RunRecord, PipelineError> {
        let record = self.store.load_run(run_id)?;
        let pending = record.pending_ids();
        log.append(&if pending.is_empty() { RunEvent::RunCompleted } else { RunEvent::RunSuspended { pending } })?;
        let record = self.store.load_run(run_id)?;
        self.store.write_report(&record)?;
        Ok(record)
    }

    /// Applies an operator's ops to the rationale queued for `sample_id` and
    /// runs the answer stage for it.
    pub async fn submit(
        &self,
        run_id: &str,
        sample_id: &str,
        ops: Vec<CorrectionOp>,
        author: &str,
        timestamp: DateTime<Utc>,
    ) -> Result<RunRecord, PipelineError> {
        let record = self.store.load_run(run_id)?;
        let item = self.queued_item(&record, sample_id)?;
        let index = item.correction_rationale.expect("queued samples name a rationale");
        let rationale = item
            .rationales
            .iter()
            .find(|r| r.index == index)
            .ok_or_else(|| PipelineError::UnknownSample(sample_id.to_string()))?;
        let session = CorrectionSession::record(sample_id, index, &rationale.sublogics, ops, author, timestamp)?;
        let log = self.store.events(run_id)?;
        self.resolve(&record.config, item, session, &log).await?;
        self.finish(run_id, &log)
    }

    /// Checks that `sample_id` is waiting for a correction.
    pub fn queued_item<'r>(&self, record: &'r RunRecord, sample_id: &str) -> Result<&'r SampleRecord, PipelineError> {
        let item = record.sample(sample_id).ok_or_else(|| PipelineError::UnknownSample(sample_id.to_string()))?;
        if !item.selected() {
            return Err(PipelineError::NotQueued(sample_id.to_string()));
        }
        if !item.pending() {
            return Err(PipelineError::AlreadyCorrected(sample_id.to_string()));
        }
        Ok(item)
    }
}
