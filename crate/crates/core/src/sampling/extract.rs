use std::sync::LazyLock;

use regex::Regex;

use crate::correction::segment_sublogics;
use crate::domain::{
    canonicalize_answer_with, decimal_literals, strip_numeric_noise, AnswerFormat, AnswerKind, AnswerValue,
};

pub const ANSWER_MARKER: &str = "the answer is";

static PAREN_LETTER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\(([A-Za-z])\)").unwrap());

/// Finds the final answer in generated text.
///
/// The span after the last "The answer is" wins. Without a usable marker,
/// numeric tasks fall back to the last decimal literal and choice tasks to the
/// last parenthesised letter; text tasks have no fallback.
pub fn extract_answer(raw_text: &str, format: &AnswerFormat) -> Option<AnswerValue> {
    if let Some(answer) = marked_answer(raw_text, format) {
        return Some(answer);
    }
    match format.kind {
        AnswerKind::Numeric => {
            let cleaned = strip_numeric_noise(raw_text);
            let last = decimal_literals(&cleaned).last()?;
            AnswerValue::numeric(last)
        }
        AnswerKind::Choice => PAREN_LETTER
            .captures_iter(raw_text)
            .filter_map(|c| c[1].chars().next())
            .map(|c| c.to_ascii_uppercase())
            .filter(|c| format.choice_alphabet.contains(c))
            .last()
            .map(AnswerValue::Choice),
        AnswerKind::Text => None,
    }
}

/// True when the text contains the answer marker.
pub fn has_answer_marker(raw_text: &str) -> bool {
    raw_text.to_lowercase().contains(ANSWER_MARKER)
}

fn marked_answer(raw_text: &str, format: &AnswerFormat) -> Option<AnswerValue> {
    // ASCII lowercasing keeps byte offsets aligned with the original.
    let lower = raw_text.to_ascii_lowercase();
    let pos = lower.rfind(ANSWER_MARKER)?;
    let tail = &raw_text[pos + ANSWER_MARKER.len()..];
    let line = tail.lines().next().unwrap_or("");
    let sentence = segment_sublogics(line).into_iter().next()?;
    let span = sentence.trim_end_matches(['.', '!', '?', '"', '\'']).trim();
    let span = span.trim_start_matches(':').trim();
    canonicalize_answer_with(span, format).ok()
}
