use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::Sample;

/// The eight arithmetic exemplars used for every arithmetic task.
pub const ARITHMETIC_EXEMPLARS: &str = include_str!("../../fixtures/prompts/arithmetic.txt");

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("prompt set {0:?} has no exemplars")]
    Empty(String),
    #[error("prompt set {set:?}, exemplar {index}: {reason}")]
    Malformed { set: String, index: usize, reason: String },
    #[error("reading prompt set {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub question: String,
    /// Worked rationale ending in "The answer is <X>."
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub id: String,
    pub exemplars: Vec<Exemplar>,
}

static ANSWER_SENTENCE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"The answer is \S.*\.$").unwrap());

impl PromptSet {
    pub fn new(id: impl Into<String>, exemplars: Vec<Exemplar>) -> Result<Self, PromptError> {
        let id = id.into();
        if exemplars.is_empty() {
            return Err(PromptError::Empty(id));
        }
        for (index, ex) in exemplars.iter().enumerate() {
            if !ANSWER_SENTENCE.is_match(ex.rationale.trim_end()) {
                return Err(PromptError::Malformed {
                    set: id,
                    index,
                    reason: "rationale must end with \"The answer is <X>.\"".into(),
                });
            }
        }
        Ok(Self { id, exemplars })
    }

    /// Parses blank-line separated `Q: ...` / `A: ...` blocks.
    pub fn parse(id: impl Into<String>, text: &str) -> Result<Self, PromptError> {
        let id = id.into();
        let mut exemplars = Vec::new();
        let blocks = text.replace("\r\n", "\n");
        for (index, block) in blocks.split("\n\n").map(str::trim).filter(|b| !b.is_empty()).enumerate() {
            let malformed = |reason: &str| PromptError::Malformed { set: id.clone(), index, reason: reason.into() };
            let body = block.strip_prefix("Q:").ok_or_else(|| malformed("block must start with \"Q:\""))?;
            let (question, rationale) = body.split_once("\nA:").ok_or_else(|| malformed("missing \"A:\" line"))?;
            exemplars.push(Exemplar {
                question: question.split_whitespace().collect::<Vec<_>>().join(" "),
                rationale: rationale.split_whitespace().collect::<Vec<_>>().join(" "),
            });
        }
        Self::new(id, exemplars)
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| PromptError::Io { path: path.display().to_string(), source })?;
        let id = path.file_stem().map_or_else(|| "prompts".to_string(), |s| s.to_string_lossy().into_owned());
        Self::parse(id, &text)
    }

    pub fn arithmetic() -> Self {
        Self::parse("arithmetic", ARITHMETIC_EXEMPLARS).expect("bundled exemplars are well formed")
    }

    pub fn to_text(&self) -> String {
        self.exemplars.iter().map(|e| format!("Q: {}\nA: {}\n", e.question, e.rationale)).collect::<Vec<_>>().join("\n")
    }
}

/// Few-shot CoT prompt for `sample`.
///
/// With `corrected_prefix` the corrected sub-logics follow the final `A:` so
/// the decoder continues from the repaired rationale.
pub fn build_prompt(prompt_set: &PromptSet, sample: &Sample, corrected_prefix: Option<&[String]>) -> String {
    let mut prompt = String::new();
    for ex in &prompt_set.exemplars {
        prompt.push_str("Q: ");
        prompt.push_str(&ex.question);
        prompt.push_str("\nA: ");
        prompt.push_str(&ex.rationale);
        prompt.push('\n');
    }
    prompt.push_str("Q: ");
    prompt.push_str(&sample.question);
    prompt.push_str("\nA:");
    if let Some(prefix) = corrected_prefix.filter(|p| !p.is_empty()) {
        prompt.push(' ');
        prompt.push_str(&prefix.join(" "));
    }
    prompt
}
