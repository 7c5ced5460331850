//! Value types shared across the pipeline, plus answer canonicalization.
//!
//! Answers are compared only through their canonical form: numeric answers
//! become exact decimal strings, multiple-choice answers a single uppercase
//! letter and free text a lowercased, whitespace-collapsed string.

use std::fmt;
use std::sync::LazyLock;

use num_rational::Ratio;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AnswerError {
    #[error("answer text is empty")]
    Empty,
    #[error("unparseable answer {raw:?} for {kind} task")]
    UnparseableAnswer { raw: String, kind: AnswerKind },
}

/// How final answers of a task are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AnswerKind {
    #[default]
    Numeric,
    Choice,
    Text,
}

impl fmt::Display for AnswerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnswerKind::Numeric => "numeric",
            AnswerKind::Choice => "choice",
            AnswerKind::Text => "text",
        })
    }
}

impl std::str::FromStr for AnswerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "numeric" => Ok(AnswerKind::Numeric),
            "choice" => Ok(AnswerKind::Choice),
            "text" => Ok(AnswerKind::Text),
            other => Err(format!("unknown answer kind {other:?}")),
        }
    }
}

/// Answer kind together with the letters accepted for choice tasks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerFormat {
    pub kind: AnswerKind,
    #[serde(default = "default_alphabet")]
    pub choice_alphabet: Vec<char>,
}

fn default_alphabet() -> Vec<char> {
    ('A'..='E').collect()
}

impl AnswerFormat {
    pub fn new(kind: AnswerKind) -> Self {
        Self { kind, choice_alphabet: default_alphabet() }
    }
}

impl Default for AnswerFormat {
    fn default() -> Self {
        Self::new(AnswerKind::Numeric)
    }
}

impl From<AnswerKind> for AnswerFormat {
    fn from(kind: AnswerKind) -> Self {
        Self::new(kind)
    }
}

/// Exact decimal in canonical textual form: optional `-`, integer digits
/// without leading zeros, and a fractional part without trailing zeros.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Decimal(String);

impl Decimal {
    /// Parses a plain decimal literal such as `-0012.500`.
    pub fn parse(literal: &str) -> Option<Self> {
        let (negative, body) = match literal.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, literal.strip_prefix('+').unwrap_or(literal)),
        };
        let (int, frac) = match body.split_once('.') {
            Some((i, f)) => (i, f),
            None => (body, ""),
        };
        if int.is_empty() && frac.is_empty() {
            return None;
        }
        if !int.bytes().all(|b| b.is_ascii_digit()) || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        let int = int.trim_start_matches('0');
        let frac = frac.trim_end_matches('0');
        let int = if int.is_empty() { "0" } else { int };
        let zero = int == "0" && frac.is_empty();
        let mut out = String::with_capacity(literal.len());
        if negative && !zero {
            out.push('-');
        }
        out.push_str(int);
        if !frac.is_empty() {
            out.push('.');
            out.push_str(frac);
        }
        Some(Decimal(out))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn to_f64(&self) -> f64 {
        self.0.parse().unwrap_or(f64::NAN)
    }
}

impl fmt::Display for Decimal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for Decimal {
    type Error = String;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Decimal::parse(&value).ok_or_else(|| format!("invalid decimal {value:?}"))
    }
}

impl From<Decimal> for String {
    fn from(value: Decimal) -> Self {
        value.0
    }
}

/// A canonicalized final answer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum AnswerValue {
    Numeric(Decimal),
    Choice(char),
    Text(String),
}

impl AnswerValue {
    pub fn numeric(literal: &str) -> Option<Self> {
        Decimal::parse(literal).map(AnswerValue::Numeric)
    }

    pub fn kind(&self) -> AnswerKind {
        match self {
            AnswerValue::Numeric(_) => AnswerKind::Numeric,
            AnswerValue::Choice(_) => AnswerKind::Choice,
            AnswerValue::Text(_) => AnswerKind::Text,
        }
    }
}

impl fmt::Display for AnswerValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnswerValue::Numeric(d) => d.fmt(f),
            AnswerValue::Choice(c) => write!(f, "{c}"),
            AnswerValue::Text(t) => f.write_str(t),
        }
    }
}

static CURRENCY: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[$€£¥₹]").unwrap());
static THOUSANDS: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(\d),(\d)").unwrap());
static DECIMAL_LITERAL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"-?(?:\d+(?:\.\d+)?|\.\d+)").unwrap());

/// Strips currency symbols and thousands separators so decimal literals can
/// be matched directly.
pub(crate) fn strip_numeric_noise(raw: &str) -> String {
    let stripped = CURRENCY.replace_all(raw, "");
    // Applied twice: overlapping matches such as "1,234,567" share a digit.
    let once = THOUSANDS.replace_all(&stripped, "$1$2");
    THOUSANDS.replace_all(&once, "$1$2").into_owned()
}

pub(crate) fn decimal_literals(cleaned: &str) -> impl Iterator<Item = &str> {
    DECIMAL_LITERAL.find_iter(cleaned).map(|m| m.as_str())
}

/// Canonicalizes `raw` with the default A–E choice alphabet.
pub fn canonicalize_answer(raw: &str, kind: AnswerKind) -> Result<AnswerValue, AnswerError> {
    canonicalize_answer_with(raw, &AnswerFormat::new(kind))
}

pub fn canonicalize_answer_with(raw: &str, format: &AnswerFormat) -> Result<AnswerValue, AnswerError> {
    if raw.trim().is_empty() {
        return Err(AnswerError::Empty);
    }
    let unparseable = || AnswerError::UnparseableAnswer { raw: raw.to_string(), kind: format.kind };
    match format.kind {
        AnswerKind::Numeric => {
            let cleaned = strip_numeric_noise(raw);
            let literal = decimal_literals(&cleaned).next().ok_or_else(unparseable)?;
            AnswerValue::numeric(literal).ok_or_else(unparseable)
        }
        AnswerKind::Choice => {
            choice_letter(raw, &format.choice_alphabet).map(AnswerValue::Choice).ok_or_else(unparseable)
        }
        AnswerKind::Text => {
            let text = raw.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
            Ok(AnswerValue::Text(text))
        }
    }
}

/// First standalone letter of the alphabet, e.g. `b`, `(B)` or `B)`.
fn choice_letter(raw: &str, alphabet: &[char]) -> Option<char> {
    raw.split(|c: char| !c.is_alphanumeric())
        .filter(|tok| tok.chars().count() == 1)
        .filter_map(|tok| tok.chars().next())
        .map(|c| c.to_ascii_uppercase())
        .find(|c| alphabet.contains(c))
}

/// One vote bucket: a canonical answer, or the absence of one.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vote {
    Answer(AnswerValue),
    NoAnswer,
}

impl From<Option<AnswerValue>> for Vote {
    fn from(value: Option<AnswerValue>) -> Self {
        value.map_or(Vote::NoAnswer, Vote::Answer)
    }
}

impl From<AnswerValue> for Vote {
    fn from(value: AnswerValue) -> Self {
        Vote::Answer(value)
    }
}

impl Vote {
    pub fn answer(&self) -> Option<&AnswerValue> {
        match self {
            Vote::Answer(a) => Some(a),
            Vote::NoAnswer => None,
        }
    }
}

impl fmt::Display for Vote {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Vote::Answer(a) => a.fmt(f),
            Vote::NoAnswer => f.write_str("NO_ANSWER"),
        }
    }
}

/// One question instance flowing through the pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub task: String,
    pub question: String,
    #[serde(default)]
    pub gold_answer: Option<AnswerValue>,
    pub prompt_set: String,
}

/// One decoded chain of thought.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rationale {
    pub sample_id: String,
    pub index: usize,
    pub sublogics: Vec<String>,
    pub raw_text: String,
    pub answer: Option<AnswerValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unnormalized_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalized_prob: Option<f64>,
}

impl Rationale {
    /// Sets the token trace and the two sequence probabilities derived from it.
    pub fn with_logprobs(mut self, logprobs: Option<Vec<f64>>) -> Self {
        match logprobs.filter(|lp| !lp.is_empty()) {
            Some(lp) => {
                let sum: f64 = lp.iter().sum();
                self.unnormalized_prob = Some(sum.exp().clamp(0.0, 1.0));
                self.normalized_prob = Some((sum / lp.len() as f64).exp().clamp(0.0, 1.0));
                self.token_logprobs = Some(lp);
            }
            None => {
                self.token_logprobs = None;
                self.unnormalized_prob = None;
                self.normalized_prob = None;
            }
        }
        self
    }

    pub fn vote(&self) -> Vote {
        self.answer.clone().into()
    }
}

/// Answer-aggregation strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Unweighted sum: plain majority vote.
    #[default]
    Uus,
    Uws,
    Nws,
    Uwa,
    Nwa,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [Strategy::Uus, Strategy::Uws, Strategy::Nws, Strategy::Uwa, Strategy::Nwa];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Uus => "uus",
            Strategy::Uws => "uws",
            Strategy::Nws => "nws",
            Strategy::Uwa => "uwa",
            Strategy::Nwa => "nwa",
        })
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "uus" => Ok(Strategy::Uus),
            "uws" => Ok(Strategy::Uws),
            "nws" => Ok(Strategy::Nws),
            "uwa" => Ok(Strategy::Uwa),
            "nwa" => Ok(Strategy::Nwa),
            other => Err(format!("unknown aggregation strategy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteWeight {
    pub vote: Vote,
    /// Number of rationales that produced this vote.
    pub count: usize,
    pub weight: f64,
    /// Lowest rationale index that produced this vote.
    pub first_index: usize,
}

/// Per-answer weights for one sample, in order of first appearance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerDistribution {
    pub strategy: Strategy,
    pub entries: Vec<VoteWeight>,
    pub n: usize,
}

impl AnswerDistribution {
    pub fn get(&self, vote: &Vote) -> Option<&VoteWeight> {
        self.entries.iter().find(|e| &e.vote == vote)
    }

    pub fn weight(&self, vote: &Vote) -> f64 {
        self.get(vote).map_or(0.0, |e| e.weight)
    }

    /// Exact `count / n` of a vote. Only meaningful for [`Strategy::Uus`].
    pub fn exact_probability(&self, vote: &Vote) -> Option<Ratio<usize>> {
        if self.strategy != Strategy::Uus || self.n == 0 {
            return None;
        }
        Some(Ratio::new(self.get(vote).map_or(0, |e| e.count), self.n))
    }

    /// Exact total mass; `Some(1)` for every well-formed UUS distribution.
    pub fn exact_total(&self) -> Option<Ratio<usize>> {
        if self.strategy != Strategy::Uus || self.n == 0 {
            return None;
        }
        Some(Ratio::new(self.entries.iter().map(|e| e.count).sum(), self.n))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Diversity Entropy of one sample's answers, in nats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityScore {
    pub value: f64,
    pub num_answers: usize,
}

impl DiversityScore {
    pub fn is_unanimous(&self) -> bool {
        self.value == 0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn num(s: &str) -> AnswerValue {
        AnswerValue::numeric(s).unwrap()
    }

    #[test]
    fn numeric_examples() {
        assert_eq!(canonicalize_answer("$8", AnswerKind::Numeric).unwrap(), num("8"));
        assert_eq!(canonicalize_answer("8", AnswerKind::Numeric).unwrap(), num("8"));
        assert_eq!(canonicalize_answer("1,250.50", AnswerKind::Numeric).unwrap(), num("1250.5"));
        assert_eq!(canonicalize_answer("26.0", AnswerKind::Numeric).unwrap(), num("26"));
        assert_eq!(canonicalize_answer("1,234,567", AnswerKind::Numeric).unwrap(), num("1234567"));
        assert_eq!(canonicalize_answer("-0.50", AnswerKind::Numeric).unwrap(), num("-0.5"));
        assert_eq!(canonicalize_answer("-0", AnswerKind::Numeric).unwrap(), num("0"));
    }

    #[test]
    fn numeric_without_literal_is_unparseable() {
        assert!(matches!(
            canonicalize_answer("eight", AnswerKind::Numeric),
            Err(AnswerError::UnparseableAnswer { .. })
        ));
        assert_eq!(canonicalize_answer("  ", AnswerKind::Numeric), Err(AnswerError::Empty));
    }

    #[test]
    fn choice_and_text() {
        assert_eq!(canonicalize_answer("(b)", AnswerKind::Choice).unwrap(), AnswerValue::Choice('B'));
        assert_eq!(canonicalize_answer("C) 42", AnswerKind::Choice).unwrap(), AnswerValue::Choice('C'));
        assert!(canonicalize_answer("(F)", AnswerKind::Choice).is_err());
        let wide = AnswerFormat { kind: AnswerKind::Choice, choice_alphabet: ('A'..='F').collect() };
        assert_eq!(canonicalize_answer_with("(F)", &wide).unwrap(), AnswerValue::Choice('F'));
        assert_eq!(
            canonicalize_answer("  Yes \n  indeed ", AnswerKind::Text).unwrap(),
            AnswerValue::Text("yes indeed".into())
        );
    }

    #[test]
    fn decimal_serde_uses_canonical_string() {
        let v = num("0012.3400");
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, r#"{"kind":"numeric","value":"12.34"}"#);
        assert_eq!(serde_json::from_str::<AnswerValue>(&json).unwrap(), v);
    }

    #[test]
    fn logprob_fields() {
        let r = Rationale {
            sample_id: "s".into(),
            index: 0,
            sublogics: vec![],
            raw_text: String::new(),
            answer: None,
            token_logprobs: None,
            unnormalized_prob: None,
            normalized_prob: None,
        }
        .with_logprobs(Some(vec![0.5f64.ln(), 0.5f64.ln()]));
        assert!((r.unnormalized_prob.unwrap() - 0.25).abs() < 1e-15);
        assert!((r.normalized_prob.unwrap() - 0.5).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn canonicalization_is_idempotent(raw in "[ $,0-9.a-eA-E()-]{1,16}", kind_idx in 0usize..3) {
            let kind = [AnswerKind::Numeric, AnswerKind::Choice, AnswerKind::Text][kind_idx];
            if let Ok(once) = canonicalize_answer(&raw, kind) {
                let twice = canonicalize_answer(&once.to_string(), kind).unwrap();
                prop_assert_eq!(once, twice);
            }
        }

        #[test]
        fn equal_decimals_share_canonical_form(int in 0u32..100_000, frac in 0u32..1000, pad in 0usize..3) {
            let plain = format!("{int}.{frac:03}");
            let padded = format!("{}{}{}", "0".repeat(pad), plain, "0".repeat(pad));
            prop_assert_eq!(Decimal::parse(&plain), Decimal::parse(&padded));
        }

        #[test]
        fn normalized_prob_is_root_of_unnormalized(lp in proptest::collection::vec(-3.0f64..0.0, 1..20)) {
            let k = lp.len() as f64;
            let r = Rationale {
                sample_id: "s".into(), index: 0, sublogics: vec![], raw_text: String::new(),
                answer: None, token_logprobs: None, unnormalized_prob: None, normalized_prob: None,
            }.with_logprobs(Some(lp));
            let u = r.unnormalized_prob.unwrap();
            let n = r.normalized_prob.unwrap();
            prop_assert!((0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&n));
            prop_assert!((u.powf(1.0 / k) - n).abs() < 1e-9);
        }
    }
}
