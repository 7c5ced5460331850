#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use cotloop::Pipeline;
use cotloop_core::correction::{latest_by_sample, read_correction_log, CorrectionSession};
use cotloop_core::domain::{AnswerFormat, Sample};
use cotloop_core::sampling::{ReplayBackend, RetryPolicy};
use cotloop_core::store::{ingest_dataset, RunConfig, RunMode, RunStore};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn samples() -> Vec<Sample> {
    ingest_dataset(&fixture("addsub10.jsonl"), "addsub", &AnswerFormat::default(), "arithmetic").unwrap()
}

pub fn corrections() -> BTreeMap<String, CorrectionSession> {
    latest_by_sample(read_correction_log(&fixture("addsub10.corrections.jsonl")).unwrap())
}

pub fn replay() -> Arc<ReplayBackend> {
    Arc::new(ReplayBackend::load(&fixture("addsub10.replay.jsonl")).unwrap())
}

pub fn config(mode: RunMode, alpha: f64) -> RunConfig {
    let mut config = RunConfig { mode, alpha, ..RunConfig::default() };
    config.sampling.n = 5;
    config.sampling.retry = RetryPolicy::immediate(3);
    config
}

pub fn pipeline(runs: &Path, backend: Arc<ReplayBackend>) -> Pipeline {
    Pipeline::new(RunStore::new(runs), backend)
}
