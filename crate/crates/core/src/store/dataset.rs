use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::StoreError;
use crate::domain::{canonicalize_answer_with, AnswerFormat, Sample};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetLine {
    #[serde(default)]
    id: Option<String>,
    question: String,
    #[serde(default)]
    answer: Option<serde_json::Value>,
}

/// Stable id derived from the question text.
pub fn question_id(question: &str) -> String {
    let digest = Sha256::digest(question.trim().as_bytes());
    format!("q-{}", &hex::encode(digest)[..12])
}

/// Reads a JSON-lines dataset of `{id?, question, answer?}` records.
///
/// Numeric answers may be given as JSON numbers or strings. Blank lines are
/// skipped; ids must be unique.
pub fn ingest_dataset(
    path: &Path,
    task: &str,
    format: &AnswerFormat,
    prompt_set: &str,
) -> Result<Vec<Sample>, StoreError> {
    let parse = |line: usize, reason: String| StoreError::Parse { path: path.to_path_buf(), line, reason };
    let file = File::open(path).map_err(|source| StoreError::Io { path: path.to_path_buf(), source })?;
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| parse(lineno, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetLine = serde_json::from_str(&line).map_err(|e| parse(lineno, e.to_string()))?;
        if rec.question.trim().is_empty() {
            return Err(parse(lineno, "empty question".into()));
        }
        let gold_answer = match rec.answer {
            None | Some(serde_json::Value::Null) => None,
            Some(serde_json::Value::String(s)) => Some(s),
            Some(serde_json::Value::Number(n)) => Some(n.to_string()),
            Some(other) => return Err(parse(lineno, format!("answer must be a string or number, got {other}"))),
        }
        .map(|raw| canonicalize_answer_with(&raw, format).map_err(|e| parse(lineno, e.to_string())))
        .transpose()?;
        let id = rec.id.unwrap_or_else(|| question_id(&rec.question));
        if !seen.insert(id.clone()) {
            return Err(parse(lineno, format!("duplicate id {id:?}")));
        }
        samples.push(Sample {
            id,
            task: task.to_string(),
            question: rec.question,
            gold_answer,
            prompt_set: prompt_set.to_string(),
        });
    }
    Ok(samples)
}
