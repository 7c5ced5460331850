//! Sub-logic segmentation and the human edit operations applied to them.
//!
//! A sub-logic is one sentence of a rationale. Operators repair a rationale
//! with an ordered list of [`CorrectionOp`]s; the original sentences are never
//! mutated, sessions only record the deltas.

mod lease;
mod log;

pub use lease::{Lease, LeaseError, LeaseManager};
pub use log::{latest_by_sample, read_correction_log, CorrectionLog, CorrectionLogError};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CorrectionError {
    #[error("op #{op}: index {index} out of bounds for {len} sub-logics")]
    IndexOutOfBounds { op: usize, index: usize, len: usize },
    #[error("op #{op}: {reason}")]
    InvalidText { op: usize, reason: String },
    #[error("session for {sample_id} records sub-logics that differ from replaying its ops")]
    InconsistentSession { sample_id: String },
}

/// Splits a rationale into sentences.
///
/// A sentence ends at a run of `.`, `!` or `?` (plus any closing quotes or
/// brackets) followed by whitespace or end of text. Periods inside decimal
/// literals or currency amounts (`$3.50`) never qualify since a digit follows
/// them directly.
pub fn segment_sublogics(raw_text: &str) -> Vec<String> {
    let chars: Vec<(usize, char)> = raw_text.char_indices().collect();
    let mut out = Vec::new();
    let mut start = 0usize;
    let mut i = 0usize;
    while i < chars.len() {
        let c = chars[i].1;
        if matches!(c, '.' | '!' | '?') {
            let mut j = i + 1;
            while j < chars.len() && matches!(chars[j].1, '.' | '!' | '?' | '"' | '\'' | ')' | ']' | '”' | '’') {
                j += 1;
            }
            let at_boundary = j == chars.len() || chars[j].1.is_whitespace();
            if at_boundary {
                let end = chars.get(j).map_or(raw_text.len(), |&(b, _)| b);
                push_trimmed(&mut out, &raw_text[start..end]);
                start = end;
            }
            i = j;
        } else {
            i += 1;
        }
    }
    push_trimmed(&mut out, &raw_text[start..]);
    out
}

fn push_trimmed(out: &mut Vec<String>, piece: &str) {
    let piece = piece.trim();
    if !piece.is_empty() {
        out.push(piece.to_string());
    }
}

/// Collapses whitespace runs to single spaces and trims.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Joins sub-logics back into rationale text.
pub fn join_sublogics<S: AsRef<str>>(sublogics: &[S]) -> String {
    sublogics.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorrectionOp {
    /// Replace the sentence at `index`.
    Modify {
        index: usize,
        text: String,
    },
    /// Insert before `index`; `index == len` appends.
    Add {
        index: usize,
        text: String,
    },
    Delete {
        index: usize,
    },
}

impl CorrectionOp {
    pub fn kind(&self) -> OpKind {
        match self {
            CorrectionOp::Modify { .. } => OpKind::Modify,
            CorrectionOp::Add { .. } => OpKind::Add,
            CorrectionOp::Delete { .. } => OpKind::Delete,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Modify,
    Add,
    Delete,
}

fn validate_sentence(op: usize, text: &str) -> Result<(), CorrectionError> {
    let invalid = |reason: &str| CorrectionError::InvalidText { op, reason: reason.to_string() };
    match segment_sublogics(text).len() {
        0 => Err(invalid("replacement text is empty")),
        1 => Ok(()),
        n => Err(invalid(&format!("replacement text must be one sentence, found {n}"))),
    }
}

/// Left fold of `ops` over `sublogics`. Ops are validated against the list
/// state at their turn; errors name the offending op by ordinal.
pub fn apply_ops(sublogics: &[String], ops: &[CorrectionOp]) -> Result<Vec<String>, CorrectionError> {
    let mut out = sublogics.to_vec();
    for (ordinal, op) in ops.iter().enumerate() {
        let len = out.len();
        match op {
            CorrectionOp::Modify { index, text } => {
                if *index >= len {
                    return Err(CorrectionError::IndexOutOfBounds { op: ordinal, index: *index, len });
                }
                validate_sentence(ordinal, text)?;
                out[*index] = text.trim().to_string();
            }
            CorrectionOp::Add { index, text } => {
                if *index > len {
                    return Err(CorrectionError::IndexOutOfBounds { op: ordinal, index: *index, len });
                }
                validate_sentence(ordinal, text)?;
                out.insert(*index, text.trim().to_string());
            }
            CorrectionOp::Delete { index } => {
                if *index >= len {
                    return Err(CorrectionError::IndexOutOfBounds { op: ordinal, index: *index, len });
                }
                out.remove(*index);
            }
        }
    }
    Ok(out)
}

/// Number of leading sentences of the corrected rationale that end at the
/// last edit. Sentences after it were derived from the uncorrected reasoning,
/// so the answer stage lets the model regenerate them. `None` without ops.
pub fn edited_prefix_len(ops: &[CorrectionOp]) -> Option<usize> {
    let mut keep: Option<usize> = None;
    for op in ops {
        let k = keep.unwrap_or(0);
        keep = Some(match *op {
            CorrectionOp::Modify { index, .. } => k.max(index + 1),
            CorrectionOp::Add { index, .. } => (if k > index { k + 1 } else { k }).max(index + 1),
            CorrectionOp::Delete { index } => (if k > index { k - 1 } else { k }).max(index),
        });
    }
    keep
}

/// One operator's repair of one rationale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionSession {
    pub sample_id: String,
    pub rationale_index: usize,
    pub ops: Vec<CorrectionOp>,
    pub author: String,
    pub timestamp: DateTime<Utc>,
    pub resulting_sublogics: Vec<String>,
}

impl CorrectionSession {
    /// Applies `ops` to `original` and records the outcome.
    pub fn record(
        sample_id: impl Into<String>,
        rationale_index: usize,
        original: &[String],
        ops: Vec<CorrectionOp>,
        author: impl Into<String>,
        timestamp: DateTime<Utc>,
    ) -> Result<Self, CorrectionError> {
        let resulting_sublogics = apply_ops(original, &ops)?;
        Ok(Self {
            sample_id: sample_id.into(),
            rationale_index,
            ops,
            author: author.into(),
            timestamp,
            resulting_sublogics,
        })
    }

    /// Replays the ops over `original`; fails if the stored result disagrees.
    pub fn verify(&self, original: &[String]) -> Result<(), CorrectionError> {
        let replayed = apply_ops(original, &self.ops)?;
        if replayed != self.resulting_sublogics {
            return Err(CorrectionError::InconsistentSession { sample_id: self.sample_id.clone() });
        }
        Ok(())
    }
}

/// Error category of one corrected rationale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorType {
    Modify,
    Add,
    Delete,
    Unable,
}

impl ErrorType {
    pub const ALL: [ErrorType; 4] = [ErrorType::Modify, ErrorType::Add, ErrorType::Delete, ErrorType::Unable];
}

/// A session counts as fixable by one edit type only when it fixed the
/// outcome with exactly one op; everything else is `Unable`.
pub fn classify_session(session: &CorrectionSession, fixed_outcome: bool) -> ErrorType {
    if !fixed_outcome {
        return ErrorType::Unable;
    }
    match session.ops.as_slice() {
        [only] => match only.kind() {
            OpKind::Modify => ErrorType::Modify,
            OpKind::Add => ErrorType::Add,
            OpKind::Delete => ErrorType::Delete,
        },
        _ => ErrorType::Unable,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct TaxonomyCounts {
    pub modify: usize,
    pub add: usize,
    pub delete: usize,
    pub unable: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct TaxonomyRatios {
    pub modify: f64,
    pub add: f64,
    pub delete: f64,
    pub unable: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ErrorTaxonomyReport {
    pub total: usize,
    pub counts: TaxonomyCounts,
    pub ratios: TaxonomyRatios,
}

impl ErrorTaxonomyReport {
    pub fn count(&self, ty: ErrorType) -> usize {
        match ty {
            ErrorType::Modify => self.counts.modify,
            ErrorType::Add => self.counts.add,
            ErrorType::Delete => self.counts.delete,
            ErrorType::Unable => self.counts.unable,
        }
    }

    pub fn ratio(&self, ty: ErrorType) -> f64 {
        match ty {
            ErrorType::Modify => self.ratios.modify,
            ErrorType::Add => self.ratios.add,
            ErrorType::Delete => self.ratios.delete,
            ErrorType::Unable => self.ratios.unable,
        }
    }

    /// Ratio in whole percent, rounded half away from zero.
    pub fn percent(&self, ty: ErrorType) -> u32 {
        (self.ratio(ty) * 100.0).round() as u32
    }
}

pub fn taxonomy_report(classified: &[ErrorType]) -> ErrorTaxonomyReport {
    let mut counts = TaxonomyCounts::default();
    for ty in classified {
        match ty {
            ErrorType::Modify => counts.modify += 1,
            ErrorType::Add => counts.add += 1,
            ErrorType::Delete => counts.delete += 1,
            ErrorType::Unable => counts.unable += 1,
        }
    }
    let total = classified.len();
    let ratio = |c: usize| {
        if total == 0 {
            0.0
        } else {
            c as f64 / total as f64
        }
    };
    ErrorTaxonomyReport {
        total,
        counts,
        ratios: TaxonomyRatios {
            modify: ratio(counts.modify),
            add: ratio(counts.add),
            delete: ratio(counts.delete),
            unable: ratio(counts.unable),
        },
    }
}
