//! Diversity Entropy over a sample's answer multiset and the top-α selection
//! that routes samples to human correction.
//!
//! Entropy is measured in nats. Rankings are base-independent, so only the
//! magnitudes in reports depend on that choice.

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{AnswerDistribution, DiversityScore, Sample, Strategy, Vote, VoteWeight};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("answer set is empty")]
    EmptyAnswerSet,
    #[error("distribution is not a probability distribution ({0})")]
    NotADistribution(String),
    #[error("alpha must lie in [0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("ROC needs both positive and negative labels")]
    DegenerateLabels,
}

/// How many samples go to human correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum Selection {
    /// Highest-DE fraction of the evaluated batch.
    TopFraction(f64),
    /// Every sample whose DE strictly exceeds the threshold, for streaming use
    /// where the batch is not known up front.
    AboveThreshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub selection: Selection,
}

impl FilterConfig {
    /// `alpha = 0` is accepted as the degenerate "correct nothing" setting.
    pub fn top_fraction(alpha: f64) -> Result<Self, FilterError> {
        if !(0.0..=1.0).contains(&alpha) || alpha.is_nan() {
            return Err(FilterError::InvalidAlpha(alpha));
        }
        Ok(Self { selection: Selection::TopFraction(alpha) })
    }

    pub fn above_threshold(min_entropy: f64) -> Self {
        Self { selection: Selection::AboveThreshold(min_entropy) }
    }

    pub fn alpha(&self) -> Option<f64> {
        match self.selection {
            Selection::TopFraction(a) => Some(a),
            Selection::AboveThreshold(_) => None,
        }
    }
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { selection: Selection::TopFraction(0.40) }
    }
}

/// Empirical answer distribution with exact `count / n` weights.
pub fn answer_probability(answers: &[Vote]) -> Result<AnswerDistribution, FilterError> {
    if answers.is_empty() {
        return Err(FilterError::EmptyAnswerSet);
    }
    let n = answers.len();
    let mut entries: Vec<VoteWeight> = Vec::new();
    for (i, vote) in answers.iter().enumerate() {
        match entries.iter_mut().find(|e| &e.vote == vote) {
            Some(e) => e.count += 1,
            None => entries.push(VoteWeight { vote: vote.clone(), count: 1, weight: 0.0, first_index: i }),
        }
    }
    for e in &mut entries {
        e.weight = e.count as f64 / n as f64;
    }
    Ok(AnswerDistribution { strategy: Strategy::Uus, entries, n })
}

/// Shannon entropy of a majority-vote distribution, `Σ -p ln p`.
pub fn diversity_entropy(dist: &AnswerDistribution) -> Result<DiversityScore, FilterError> {
    if dist.strategy != Strategy::Uus {
        return Err(FilterError::NotADistribution(format!("strategy {} is not a vote count", dist.strategy)));
    }
    match dist.exact_total() {
        Some(total) if total == 1.into() => {}
        Some(total) => return Err(FilterError::NotADistribution(format!("weights sum to {total}"))),
        None => return Err(FilterError::EmptyAnswerSet),
    }
    // Summing over sorted counts makes the result independent of answer order.
    let mut counts: Vec<usize> = dist.entries.iter().map(|e| e.count).filter(|&c| c > 0).collect();
    counts.sort_unstable();
    let n = dist.n as f64;
    let value = counts
        .iter()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum::<f64>()
        .max(0.0);
    Ok(DiversityScore { value, num_answers: dist.n })
}

/// Convenience: entropy straight from the vote list.
pub fn entropy_of_votes(answers: &[Vote]) -> Result<DiversityScore, FilterError> {
    diversity_entropy(&answer_probability(answers)?)
}

/// `ceil(alpha * n)`, ignoring floating-point noise such as `0.7 * 10 = 7.000000000000001`.
pub fn selection_count(alpha: f64, n: usize) -> usize {
    let exact = alpha * n as f64;
    let nearest = exact.round();
    let count = if (exact - nearest).abs() < 1e-9 { nearest } else { exact.ceil() };
    (count.max(0.0) as usize).min(n)
}

/// DE descending, then id ascending.
fn rank_order(a: (&str, f64), b: (&str, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(b.0))
}

/// Indices into `scored` of the selected items, in descending DE order.
pub fn select_indices(scored: &[(&str, DiversityScore)], config: &FilterConfig) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&i, &j| rank_order((scored[i].0, scored[i].1.value), (scored[j].0, scored[j].1.value)));
    match config.selection {
        Selection::TopFraction(alpha) => {
            order.truncate(selection_count(alpha, scored.len()));
            order
        }
        Selection::AboveThreshold(t) => order.into_iter().filter(|&i| scored[i].1.value > t).collect(),
    }
}

/// Samples routed to correction, highest DE first; ties by ascending id.
pub fn select_for_correction(scored: &[(Sample, DiversityScore)], config: &FilterConfig) -> Vec<Sample> {
    let keyed: Vec<(&str, DiversityScore)> = scored.iter().map(|(s, d)| (s.id.as_str(), *d)).collect();
    select_indices(&keyed, config).into_iter().map(|i| scored[i].0.clone()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct PartStats {
    pub count: usize,
    /// Percent correct; absent for an empty part.
    pub accuracy: Option<f64>,
}

/// Unanimous samples (part 1) against samples whose answers disagree (part 2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct PartitionReport {
    pub part1: PartStats,
    pub part2: PartStats,
}

impl PartitionReport {
    pub fn total(&self) -> usize {
        self.part1.count + self.part2.count
    }
}

pub fn partition_report(results: &[(DiversityScore, bool)]) -> PartitionReport {
    let stats = |unanimous: bool| {
        let (count, correct) = results
            .iter()
            .filter(|(d, _)| d.is_unanimous() == unanimous)
            .fold((0usize, 0usize), |(n, c), (_, ok)| (n + 1, c + usize::from(*ok)));
        PartStats { count, accuracy: (count > 0).then(|| 100.0 * correct as f64 / count as f64) }
    };
    PartitionReport { part1: stats(true), part2: stats(false) }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Samples with DE at or above this value are flagged; `+inf` flags nothing.
    pub threshold: f64,
}

/// ROC sweep over DE thresholds with "incorrect" as the positive class.
pub fn roc_points(results: &[(DiversityScore, bool)]) -> Result<Vec<RocPoint>, FilterError> {
    let positives = results.iter().filter(|(_, incorrect)| *incorrect).count();
    let negatives = results.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(FilterError::DegenerateLabels);
    }
    let mut sorted: Vec<(f64, bool)> = results.iter().map(|(d, y)| (d.value, *y)).collect();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));

    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == threshold {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint { fpr: fp as f64 / negatives as f64, tpr: tp as f64 / positives as f64, threshold });
    }
    Ok(points)
}

/// Trapezoidal area under an fpr-sorted ROC curve.
pub fn roc_auc(points: &[RocPoint]) -> f64 {
    points.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum()
}

/// Per-sample outcome under both branches of the correction decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub sample_id: String,
    pub score: DiversityScore,
    pub correct_if_uncorrected: bool,
    pub correct_if_corrected: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub selected: usize,
    pub accuracy: f64,
}

/// Accuracy (percent) obtained when correcting the top-α samples, per α.
pub fn threshold_sweep(entries: &[SweepEntry], alphas: &[f64]) -> Result<Vec<SweepPoint>, FilterError> {
    let keyed: Vec<(&str, DiversityScore)> = entries.iter().map(|e| (e.sample_id.as_str(), e.score)).collect();
    alphas
        .iter()
        .map(|&alpha| {
            let config = FilterConfig::top_fraction(alpha)?;
            let mut corrected = vec![false; entries.len()];
            let selected = select_indices(&keyed, &config);
            for &i in &selected {
                corrected[i] = true;
            }
            let correct = entries
                .iter()
                .zip(&corrected)
                .filter(|(e, &c)| if c { e.correct_if_corrected } else { e.correct_if_uncorrected })
                .count();
            let accuracy = if entries.is_empty() { 0.0 } else { 100.0 * correct as f64 / entries.len() as f64 };
            Ok(SweepPoint { alpha, selected: selected.len(), accuracy })
        })
        .collect()
}

/// Writes rows as CSV with a header line.
pub fn write_csv<T: Serialize, W: Write>(rows: &[T], out: W) -> csv::Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_jsonl<T: Serialize, W: Write>(rows: &[T], mut out: W) -> std::io::Result<()> {
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{AnswerValue, Strategy};
    use proptest::prelude::*;

    fn v(n: i64) -> Vote {
        Vote::Answer(AnswerValue::numeric(&n.to_string()).unwrap())
    }

    fn score(value: f64) -> DiversityScore {
        DiversityScore { value, num_answers: 5 }
    }

    fn sample(id: &str) -> Sample {
        Sample { id: id.into(), task: "t".into(), question: "q".into(), gold_answer: None, prompt_set: "p".into() }
    }

    #[test]
    fn answer_probability_examples() {
        let d = answer_probability(&[v(13), v(13), v(26)]).unwrap();
        assert_eq!(d.exact_probability(&v(13)), Some(num_rational::Ratio::new(2, 3)));
        assert_eq!(d.exact_probability(&v(26)), Some(num_rational::Ratio::new(1, 3)));
        assert_eq!(d.exact_total(), Some(1.into()));
        let u = answer_probability(&vec![v(7); 5]).unwrap();
        assert_eq!(u.entries.len(), 1);
        assert_eq!(u.exact_probability(&v(7)), Some(1.into()));
        let all = answer_probability(&[v(1), v(2), v(3), v(4), v(5)]).unwrap();
        assert!(all.entries.iter().all(|e| e.count == 1 && e.weight == 0.2));
        assert_eq!(answer_probability(&[]), Err(FilterError::EmptyAnswerSet));
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy_of_votes(&vec![v(7); 5]).unwrap().value, 0.0);
        // -(2/3)ln(2/3) - (1/3)ln(1/3)
        let two_thirds = entropy_of_votes(&[v(13), v(13), v(26)]).unwrap().value;
        assert!((two_thirds - 0.636_514_168_294_813_4).abs() < 1e-12);
        let uniform = entropy_of_votes(&[v(1), v(2), v(3), v(4), v(5)]).unwrap().value;
        assert!((uniform - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn weighted_distribution_is_rejected() {
        let mut d = answer_probability(&[v(1), v(2)]).unwrap();
        d.strategy = Strategy::Uws;
        assert!(matches!(diversity_entropy(&d), Err(FilterError::NotADistribution(_))));
        let mut d = answer_probability(&[v(1), v(2)]).unwrap();
        d.entries[0].count = 2;
        assert!(matches!(diversity_entropy(&d), Err(FilterError::NotADistribution(_))));
    }

    #[test]
    fn selection_examples() {
        let values = [0.1, 0.9, 0.5, 0.0, 0.7, 0.3, 1.2, 0.2, 0.8, 0.6];
        let scored: Vec<_> = values.iter().enumerate().map(|(i, &d)| (sample(&format!("s{i:02}")), score(d))).collect();
        let picked = select_for_correction(&scored, &FilterConfig::top_fraction(0.4).unwrap());
        let ids: Vec<_> = picked.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["s06", "s01", "s08", "s04"]);

        let all = select_for_correction(&scored, &FilterConfig::top_fraction(1.0).unwrap());
        assert_eq!(all.len(), 10);

        let flat: Vec<_> = (0..10).rev().map(|i| (sample(&format!("s{i:02}")), score(0.0))).collect();
        let picked = select_for_correction(&flat, &FilterConfig::top_fraction(0.4).unwrap());
        let ids: Vec<_> = picked.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["s00", "s01", "s02", "s03"]);

        let above = select_for_correction(&scored, &FilterConfig::above_threshold(0.75));
        assert_eq!(above.len(), 3);
        assert!(FilterConfig::top_fraction(1.5).is_err());
        assert!(select_for_correction(&scored, &FilterConfig::top_fraction(0.0).unwrap()).is_empty());
    }

    #[test]
    fn selection_count_ignores_float_noise() {
        assert_eq!(selection_count(0.7, 10), 7);
        assert_eq!(selection_count(0.4, 10), 4);
        assert_eq!(selection_count(0.05, 395), 20);
        assert_eq!(selection_count(0.41, 10), 5);
        assert_eq!(selection_count(1.0, 3), 3);
    }

    #[test]
    fn partition_examples() {
        assert_eq!(partition_report(&[]), PartitionReport::default());
        let r = partition_report(&[(score(0.0), true), (score(0.5), false)]);
        assert_eq!(r.part1, PartStats { count: 1, accuracy: Some(100.0) });
        assert_eq!(r.part2, PartStats { count: 1, accuracy: Some(0.0) });
    }

    #[test]
    fn roc_edge_cases() {
        let separable = [(score(0.9), true), (score(0.8), true), (score(0.1), false), (score(0.0), false)];
        let pts = roc_points(&separable).unwrap();
        assert!(pts.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        assert_eq!(roc_auc(&pts), 1.0);

        let flat = [(score(0.3), true), (score(0.3), false), (score(0.3), true)];
        let pts = roc_points(&flat).unwrap();
        assert_eq!(pts.len(), 2);
        assert_eq!((pts[1].fpr, pts[1].tpr), (1.0, 1.0));
        assert_eq!(roc_auc(&pts), 0.5);

        assert_eq!(roc_points(&[(score(0.1), true)]), Err(FilterError::DegenerateLabels));
    }

    #[test]
    fn roc_matches_threshold_enumeration() {
        let data = [(score(0.6), true), (score(0.2), false), (score(0.6), false), (score(1.0), true)];
        let pts = roc_points(&data).unwrap();
        // Brute force: flag every sample with DE >= t for each distinct t.
        let mut thresholds: Vec<f64> = data.iter().map(|(d, _)| d.value).collect();
        thresholds.push(f64::INFINITY);
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let brute: Vec<(f64, f64)> = thresholds
            .iter()
            .map(|&t| {
                let tp = data.iter().filter(|(d, y)| *y && d.value >= t).count() as f64 / 2.0;
                let fp = data.iter().filter(|(d, y)| !*y && d.value >= t).count() as f64 / 2.0;
                (fp, tp)
            })
            .collect();
        let got: Vec<(f64, f64)> = pts.iter().map(|p| (p.fpr, p.tpr)).collect();
        assert_eq!(got, brute);
        assert_eq!(got, vec![(0.0, 0.0), (0.0, 0.5), (0.5, 1.0), (1.0, 1.0)]);
    }

    #[test]
    fn sweep_corrects_top_fraction() {
        let entries: Vec<SweepEntry> = (0..10)
            .map(|i| SweepEntry {
                sample_id: format!("s{i}"),
                score: score(i as f64 / 10.0),
                correct_if_uncorrected: i < 6,
                correct_if_corrected: true,
            })
            .collect();
        let pts = threshold_sweep(&entries, &[0.0, 0.2, 0.4, 0.5]).unwrap();
        let acc: Vec<f64> = pts.iter().map(|p| p.accuracy).collect();
        assert_eq!(acc, vec![60.0, 80.0, 100.0, 100.0]);
        let mut csv = Vec::new();
        write_csv(&pts, &mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("alpha,selected,accuracy\n0.0,0,60.0\n"));
    }

    proptest! {
        #[test]
        fn entropy_is_permutation_invariant(mut votes in proptest::collection::vec(0i64..4, 1..9), seed in any::<u64>()) {
            let a = entropy_of_votes(&votes.iter().map(|&x| v(x)).collect::<Vec<_>>()).unwrap();
            let k = votes.len();
            votes.rotate_left((seed as usize) % k);
            votes.reverse();
            let b = entropy_of_votes(&votes.iter().map(|&x| v(x)).collect::<Vec<_>>()).unwrap();
            prop_assert_eq!(a.value, b.value);
            prop_assert!(a.value >= 0.0 && a.value <= (k as f64).ln() + 1e-12);
        }

        #[test]
        fn ranking_is_base_invariant(dists in proptest::collection::vec(proptest::collection::vec(0i64..4, 1..7), 2..8)) {
            let nats: Vec<f64> = dists.iter().map(|d| entropy_of_votes(&d.iter().map(|&x| v(x)).collect::<Vec<_>>()).unwrap().value).collect();
            let bits: Vec<f64> = nats.iter().map(|x| x / std::f64::consts::LN_2).collect();
            for i in 0..nats.len() {
                for j in 0..nats.len() {
                    prop_assert_eq!(nats[i].partial_cmp(&nats[j]), bits[i].partial_cmp(&bits[j]));
                }
            }
        }

        #[test]
        fn novel_answer_raises_entropy(n in 2usize..10) {
            let unanimous = vec![v(1); n];
            let mut perturbed = unanimous.clone();
            perturbed[n - 1] = v(2);
            prop_assert!(entropy_of_votes(&perturbed).unwrap().value > entropy_of_votes(&unanimous).unwrap().value);
        }

        #[test]
        fn selection_size_and_separation(values in proptest::collection::vec(0u8..6, 1..30), alpha_pct in 0u32..=100) {
            let alpha = alpha_pct as f64 / 100.0;
            let scored: Vec<_> = values.iter().enumerate()
                .map(|(i, &d)| (sample(&format!("s{i:03}")), score(d as f64 / 5.0))).collect();
            let picked = select_for_correction(&scored, &FilterConfig::top_fraction(alpha).unwrap());
            prop_assert_eq!(picked.len(), selection_count(alpha, scored.len()));
            prop_assert_eq!(picked.len(), ((alpha * scored.len() as f64) - 1e-9).ceil().max(0.0) as usize);
            let chosen: std::collections::HashSet<_> = picked.iter().map(|s| s.id.clone()).collect();
            let min_sel = scored.iter().filter(|(s, _)| chosen.contains(&s.id)).map(|(_, d)| d.value).fold(f64::INFINITY, f64::min);
            let max_rest = scored.iter().filter(|(s, _)| !chosen.contains(&s.id)).map(|(_, d)| d.value).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(min_sel >= max_rest);
        }
    }
}
