//! Answer aggregation over sampled rationales and the choice of which
//! rationale a human should repair.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{AnswerDistribution, Rationale, Strategy, Vote, VoteWeight};
use crate::filtering::answer_probability;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AggregationError {
    #[error("no rationales to aggregate")]
    Empty,
    #[error("rationale {index} of {sample_id} has no token log-probabilities")]
    MissingLogprobs { sample_id: String, index: usize },
}

fn missing(r: &Rationale) -> AggregationError {
    AggregationError::MissingLogprobs { sample_id: r.sample_id.clone(), index: r.index }
}

/// Probability of the whole sequence, `exp(Σ log p_k)`.
pub fn sequence_prob_unnormalized(r: &Rationale) -> Result<f64, AggregationError> {
    let lp = r.token_logprobs.as_deref().filter(|lp| !lp.is_empty()).ok_or_else(|| missing(r))?;
    Ok(lp.iter().sum::<f64>().exp().clamp(0.0, 1.0))
}

/// Length-normalized sequence probability: geometric mean of token probabilities.
pub fn sequence_prob_normalized(r: &Rationale) -> Result<f64, AggregationError> {
    let lp = r.token_logprobs.as_deref().filter(|lp| !lp.is_empty()).ok_or_else(|| missing(r))?;
    Ok((lp.iter().sum::<f64>() / lp.len() as f64).exp().clamp(0.0, 1.0))
}

fn unnormalized(r: &Rationale) -> Result<f64, AggregationError> {
    match r.unnormalized_prob {
        Some(p) => Ok(p),
        None => sequence_prob_unnormalized(r),
    }
}

fn normalized(r: &Rationale) -> Result<f64, AggregationError> {
    match r.normalized_prob {
        Some(p) => Ok(p),
        None => sequence_prob_normalized(r),
    }
}

/// Per-answer weights under `strategy`.
///
/// Weighted sums divide by the number of rationales, weighted averages by the
/// answer's own count. Weighted distributions are left unnormalized; only
/// their argmax is meaningful.
pub fn aggregate(rationales: &[Rationale], strategy: Strategy) -> Result<AnswerDistribution, AggregationError> {
    if rationales.is_empty() {
        return Err(AggregationError::Empty);
    }
    let votes: Vec<Vote> = rationales.iter().map(Rationale::vote).collect();
    let mut dist = answer_probability(&votes).map_err(|_| AggregationError::Empty)?;
    let prob: fn(&Rationale) -> Result<f64, AggregationError> = match strategy {
        Strategy::Uus => return Ok(dist),
        Strategy::Uws | Strategy::Uwa => unnormalized,
        Strategy::Nws | Strategy::Nwa => normalized,
    };
    let n = rationales.len() as f64;
    for entry in &mut dist.entries {
        let mut sum = 0.0;
        for (r, vote) in rationales.iter().zip(&votes) {
            if vote == &entry.vote {
                sum += prob(r)?;
            }
        }
        entry.weight = match strategy {
            Strategy::Uws | Strategy::Nws => sum / n,
            _ => sum / entry.count as f64,
        };
    }
    dist.strategy = strategy;
    Ok(dist)
}

/// Relative tolerance under which two weights count as tied.
const TIE_EPSILON: f64 = 1e-12;

/// Argmax over weights; near-equal weights are ties, broken by the lowest
/// rationale index that produced the answer.
pub fn winning_answer(dist: &AnswerDistribution) -> Option<&VoteWeight> {
    let max = dist.entries.iter().map(|e| e.weight).fold(f64::NEG_INFINITY, f64::max);
    dist.entries
        .iter()
        .filter(|e| max - e.weight <= TIE_EPSILON * max.abs().max(f64::MIN_POSITIVE))
        .min_by_key(|e| e.first_index)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionPolicy {
    First,
    /// Highest sequence probability; falls back to `First` without traces.
    #[default]
    HighestSeqProb,
    /// Strict variant that fails without traces.
    HighestSeqProbStrict,
    ModalAnswerFirst,
}

impl std::str::FromStr for CorrectionPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "first" => Ok(Self::First),
            "highest_seq_prob" => Ok(Self::HighestSeqProb),
            "highest_seq_prob_strict" => Ok(Self::HighestSeqProbStrict),
            "modal_answer_first" => Ok(Self::ModalAnswerFirst),
            other => Err(format!("unknown correction policy {other:?}")),
        }
    }
}

/// Picks the rationale handed to the human operator.
pub fn rationale_for_correction(
    rationales: &[Rationale],
    policy: CorrectionPolicy,
) -> Result<&Rationale, AggregationError> {
    let first = rationales.first().ok_or(AggregationError::Empty)?;
    match policy {
        CorrectionPolicy::First => Ok(first),
        CorrectionPolicy::HighestSeqProb | CorrectionPolicy::HighestSeqProbStrict => {
            let probs: Result<Vec<f64>, _> = rationales.iter().map(unnormalized).collect();
            let probs = match probs {
                Ok(p) => p,
                Err(_) if policy == CorrectionPolicy::HighestSeqProb => return Ok(first),
                Err(e) => return Err(e),
            };
            let mut best = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i;
                }
            }
            Ok(&rationales[best])
        }
        CorrectionPolicy::ModalAnswerFirst => {
            let dist = aggregate(rationales, Strategy::Uus)?;
            let modal = winning_answer(&dist).ok_or(AggregationError::Empty)?;
            Ok(rationales.iter().find(|r| r.vote() == modal.vote).unwrap_or(first))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{AnswerValue, Strategy};
    use proptest::prelude::*;

    fn rationale(index: usize, answer: &str, logprobs: Option<Vec<f64>>) -> Rationale {
        Rationale {
            sample_id: "s".into(),
            index,
            sublogics: vec![],
            raw_text: String::new(),
            answer: AnswerValue::numeric(answer),
            token_logprobs: None,
            unnormalized_prob: None,
            normalized_prob: None,
        }
        .with_logprobs(logprobs)
    }

    fn with_prob(index: usize, answer: &str, p: f64) -> Rationale {
        rationale(index, answer, Some(vec![p.ln()]))
    }

    fn vote(answer: &str) -> Vote {
        Vote::Answer(AnswerValue::numeric(answer).unwrap())
    }

    #[test]
    fn sequence_probabilities() {
        let half = rationale(0, "1", Some(vec![0.5f64.ln(), 0.5f64.ln()]));
        assert!((sequence_prob_unnormalized(&half).unwrap() - 0.25).abs() < 1e-15);
        assert!((sequence_prob_normalized(&half).unwrap() - 0.5).abs() < 1e-15);
        let certain = rationale(0, "1", Some(vec![0.0]));
        assert_eq!(sequence_prob_unnormalized(&certain).unwrap(), 1.0);
        assert_eq!(sequence_prob_normalized(&certain).unwrap(), 1.0);
        let three = rationale(0, "1", Some(vec![0.1f64.ln(), 0.2f64.ln(), 0.5f64.ln()]));
        assert!((sequence_prob_unnormalized(&three).unwrap() - 0.01).abs() < 1e-15);
        let single = rationale(0, "1", Some(vec![0.9f64.ln()]));
        assert!((sequence_prob_normalized(&single).unwrap() - 0.9).abs() < 1e-15);
        assert!(matches!(
            sequence_prob_unnormalized(&rationale(3, "1", None)),
            Err(AggregationError::MissingLogprobs { index: 3, .. })
        ));
    }

    #[test]
    fn hand_enumerated_strategies() {
        // answers [A, A, B] with probabilities [0.2, 0.1, 0.4]
        let rs = [with_prob(0, "1", 0.2), with_prob(1, "1", 0.1), with_prob(2, "2", 0.4)];
        let winner = |s| winning_answer(&aggregate(&rs, s).unwrap()).unwrap().vote.clone();
        assert_eq!(winner(Strategy::Uus), vote("1"));
        assert_eq!(winner(Strategy::Uws), vote("2"));
        assert_eq!(winner(Strategy::Uwa), vote("2"));
        let uws = aggregate(&rs, Strategy::Uws).unwrap();
        assert!((uws.weight(&vote("1")) - 0.3 / 3.0).abs() < 1e-15);
        assert!((uws.weight(&vote("2")) - 0.4 / 3.0).abs() < 1e-15);
        let uwa = aggregate(&rs, Strategy::Uwa).unwrap();
        assert!((uwa.weight(&vote("1")) - 0.15).abs() < 1e-15);
    }

    #[test]
    fn single_and_unanimous() {
        let one = [with_prob(0, "4", 0.3)];
        let same = [with_prob(0, "4", 0.3), with_prob(1, "4", 0.6), with_prob(2, "4", 0.1)];
        for s in Strategy::ALL {
            assert_eq!(winning_answer(&aggregate(&one, s).unwrap()).unwrap().vote, vote("4"));
            assert_eq!(winning_answer(&aggregate(&same, s).unwrap()).unwrap().vote, vote("4"));
        }
    }

    #[test]
    fn weighted_needs_logprobs() {
        let rs = [rationale(0, "1", None)];
        assert!(aggregate(&rs, Strategy::Uus).is_ok());
        assert!(matches!(aggregate(&rs, Strategy::Nwa), Err(AggregationError::MissingLogprobs { .. })));
        assert_eq!(aggregate(&[], Strategy::Uus), Err(AggregationError::Empty));
    }

    #[test]
    fn winner_tie_break() {
        let d =
            aggregate(&[rationale(0, "13", None), rationale(1, "13", None), rationale(2, "26", None)], Strategy::Uus)
                .unwrap();
        assert_eq!(winning_answer(&d).unwrap().vote, vote("13"));
        let d = aggregate(&[rationale(0, "26", None), rationale(1, "13", None)], Strategy::Uus).unwrap();
        assert_eq!(winning_answer(&d).unwrap().vote, vote("26"));
    }

    #[test]
    fn correction_policies() {
        let rs: Vec<_> = (0..5).map(|i| rationale(i, "1", None)).collect();
        assert_eq!(rationale_for_correction(&rs, CorrectionPolicy::First).unwrap().index, 0);

        let rs = [with_prob(0, "1", 0.1), with_prob(1, "2", 0.4), with_prob(2, "3", 0.4)];
        assert_eq!(rationale_for_correction(&rs, CorrectionPolicy::HighestSeqProb).unwrap().index, 1);

        let rs = [rationale(0, "26", None), rationale(1, "13", None), rationale(2, "13", None)];
        assert_eq!(rationale_for_correction(&rs, CorrectionPolicy::ModalAnswerFirst).unwrap().index, 1);
        assert_eq!(rationale_for_correction(&rs, CorrectionPolicy::HighestSeqProb).unwrap().index, 0);
        assert!(rationale_for_correction(&rs, CorrectionPolicy::HighestSeqProbStrict).is_err());
    }

    proptest! {
        #[test]
        fn uws_argmax_is_scale_invariant(
            items in proptest::collection::vec((0u8..3, 1u32..10), 1..8),
        ) {
            let rs: Vec<_> = items.iter().enumerate()
                .map(|(i, &(a, p))| with_prob(i, &a.to_string(), p as f64 / 10.0)).collect();
            let dist = aggregate(&rs, Strategy::Uws).unwrap();
            let mut unscaled = dist.clone();
            for e in &mut unscaled.entries {
                e.weight *= rs.len() as f64;
            }
            prop_assert_eq!(&winning_answer(&dist).unwrap().vote, &winning_answer(&unscaled).unwrap().vote);
        }
    }
}
