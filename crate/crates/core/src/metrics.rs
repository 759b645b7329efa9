//! Agreement scoring: majority-vote / mean-and-round aggregation,
//! expected-value accuracy with ties, Krippendorff's alpha over the
//! two-rater (system, gold) matrix, and seeded paired bootstrap CIs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::judge::JudgmentSet;
use crate::model::{round_half_away_from_zero, Choice, GoldLabel, TaskKind};

/// Final system output for one instance after aggregating ten replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedOutcome {
    pub instance_id: String,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    Pairwise { result: PairwiseOutcome },
    Direct { score: u8 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairwiseOutcome {
    Win1,
    Win2,
    Tie,
}

/// Majority vote over the ten choices; an even split is a tie.
pub fn aggregate_pairwise(set: &JudgmentSet) -> Result<AggregatedOutcome> {
    if set.kind()? != TaskKind::Pairwise {
        return Err(Error::Contract(format!(
            "aggregate_pairwise needs a pairwise set for {}",
            set.instance_id
        )));
    }
    let (one, two) = set.vote_counts()?;
    let result = match one.cmp(&two) {
        std::cmp::Ordering::Greater => PairwiseOutcome::Win1,
        std::cmp::Ordering::Less => PairwiseOutcome::Win2,
        std::cmp::Ordering::Equal => PairwiseOutcome::Tie,
    };
    Ok(AggregatedOutcome {
        instance_id: set.instance_id.clone(),
        outcome: Outcome::Pairwise { result },
    })
}

/// Mean of the ten scores, rounded half away from zero, clamped to [1,5].
pub fn aggregate_direct(set: &JudgmentSet) -> Result<AggregatedOutcome> {
    if set.kind()? != TaskKind::Direct {
        return Err(Error::Contract(format!(
            "aggregate_direct needs a direct set for {}",
            set.instance_id
        )));
    }
    let scores = set.scores();
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let score = round_half_away_from_zero(mean).clamp(1.0, 5.0) as u8;
    Ok(AggregatedOutcome {
        instance_id: set.instance_id.clone(),
        outcome: Outcome::Direct { score },
    })
}

/// Expected-value score of one pairwise outcome against gold: 1 correct,
/// 0.5 tie, 0 wrong.
pub fn instance_accuracy_score(outcome: &AggregatedOutcome, gold: &GoldLabel) -> Result<f64> {
    let result = match outcome.outcome {
        Outcome::Pairwise { result } => result,
        Outcome::Direct { .. } => {
            return Err(Error::Contract(format!(
                "accuracy is defined for pairwise outcomes, got direct for {}",
                outcome.instance_id
            )))
        }
    };
    let winner = match gold {
        GoldLabel::Pairwise { winner } => *winner,
        GoldLabel::Direct { .. } => {
            return Err(Error::Contract(format!(
                "accuracy needs a pairwise gold label for {}",
                outcome.instance_id
            )))
        }
    };
    Ok(match (result, winner) {
        (PairwiseOutcome::Tie, _) => 0.5,
        (PairwiseOutcome::Win1, Choice::One) | (PairwiseOutcome::Win2, Choice::Two) => 1.0,
        _ => 0.0,
    })
}

/// Mean per-instance accuracy score over aligned outcome/gold lists.
pub fn accuracy(outcomes: &[AggregatedOutcome], golds: &[GoldLabel]) -> Result<f64> {
    if outcomes.is_empty() || outcomes.len() != golds.len() {
        return Err(Error::Contract(format!(
            "accuracy needs aligned non-empty lists, got {} outcomes and {} golds",
            outcomes.len(),
            golds.len()
        )));
    }
    let mut total = 0.0;
    for (outcome, gold) in outcomes.iter().zip(golds) {
        total += instance_accuracy_score(outcome, gold)?;
    }
    Ok(total / outcomes.len() as f64)
}

/// Difference function for Krippendorff's alpha.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaLevel {
    Nominal,
    Ordinal,
    Interval,
}

impl std::fmt::Display for AlphaLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AlphaLevel::Nominal => write!(f, "nominal"),
            AlphaLevel::Ordinal => write!(f, "ordinal"),
            AlphaLevel::Interval => write!(f, "interval"),
        }
    }
}

/// Alpha value plus a flag for degenerate data (zero expected disagreement:
/// every rating identical across both raters), where alpha is defined as 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alpha {
    pub value: f64,
    pub degenerate: bool,
}

const SCORE_DOMAIN: std::ops::RangeInclusive<u8> = 1..=5;

/// Krippendorff's alpha = 1 - D_o/D_e over the coincidence matrix of the
/// two-rater (system, gold) reliability data, with the chosen difference
/// function. Exactly 1 on perfect agreement; may be negative.
pub fn krippendorff_alpha(pairs: &[(u8, u8)], level: AlphaLevel) -> Result<Alpha> {
    if pairs.len() < 2 {
        return Err(Error::Contract(format!(
            "krippendorff_alpha needs at least 2 pairs, got {}",
            pairs.len()
        )));
    }
    for &(a, b) in pairs {
        if !SCORE_DOMAIN.contains(&a) || !SCORE_DOMAIN.contains(&b) {
            return Err(Error::Contract(format!(
                "scores must be in [1,5], got ({a},{b})"
            )));
        }
    }

    // Coincidence counts over the 1..=5 value domain. Each unit holds two
    // values and contributes both ordered pairs with weight 1/(m_u - 1) = 1.
    let mut coincidence = [[0.0f64; 5]; 5];
    for &(a, b) in pairs {
        coincidence[a as usize - 1][b as usize - 1] += 1.0;
        coincidence[b as usize - 1][a as usize - 1] += 1.0;
    }
    let marginals: Vec<f64> = (0..5)
        .map(|c| (0..5).map(|k| coincidence[c][k]).sum())
        .collect();
    let n: f64 = marginals.iter().sum();

    let delta_sq = |c: usize, k: usize| -> f64 {
        match level {
            AlphaLevel::Nominal => {
                if c == k {
                    0.0
                } else {
                    1.0
                }
            }
            AlphaLevel::Interval => {
                let d = c as f64 - k as f64;
                d * d
            }
            AlphaLevel::Ordinal => {
                let (lo, hi) = if c <= k { (c, k) } else { (k, c) };
                let between: f64 = (lo..=hi).map(|g| marginals[g]).sum();
                let d = between - (marginals[c] + marginals[k]) / 2.0;
                d * d
            }
        }
    };

    let mut observed = 0.0;
    let mut expected = 0.0;
    for c in 0..5 {
        for k in 0..5 {
            let d = delta_sq(c, k);
            observed += coincidence[c][k] * d;
            if c != k {
                expected += marginals[c] * marginals[k] * d;
            }
        }
    }
    let d_o = observed / n;
    let d_e = expected / (n * (n - 1.0));

    if d_e == 0.0 {
        return Ok(Alpha { value: 1.0, degenerate: true });
    }
    Ok(Alpha { value: 1.0 - d_o / d_e, degenerate: false })
}

/// Paired bootstrap configuration. The paper's protocol fixes 1,000
/// iterations, seed 42, and 95% confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub iterations: usize,
    pub seed: u64,
    pub confidence: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { iterations: 1000, seed: 42, confidence: 0.95 }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::Validation("bootstrap iterations must be >= 1".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::Validation(format!(
                "bootstrap confidence must be in (0,1), got {}",
                self.confidence
            )));
        }
        Ok(())
    }
}

/// Bootstrap result: empirical CI and whether it excludes zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOutcome {
    pub ci_low: f64,
    pub ci_high: f64,
    pub significant: bool,
}

/// Generic paired bootstrap: resample instance indices with replacement
/// and evaluate `statistic` on each resampled index multiset. The RNG is
/// ChaCha8 with one stream per iteration, so results are independent of
/// evaluation order.
pub fn bootstrap_paired<F>(
    n_instances: usize,
    config: &BootstrapConfig,
    statistic: F,
) -> Result<BootstrapOutcome>
where
    F: Fn(&[usize]) -> f64,
{
    config.validate()?;
    if n_instances < 2 {
        return Err(Error::Contract(format!(
            "bootstrap needs at least 2 instances, got {n_instances}"
        )));
    }
    let mut stats = Vec::with_capacity(config.iterations);
    let mut indices = vec![0usize; n_instances];
    for iteration in 0..config.iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(iteration as u64);
        for slot in indices.iter_mut() {
            *slot = rng.gen_range(0..n_instances);
        }
        stats.push(statistic(&indices));
    }
    stats.sort_by(|a, b| a.partial_cmp(b).expect("bootstrap statistics are finite"));
    let tail = (1.0 - config.confidence) / 2.0;
    let ci_low = percentile(&stats, tail);
    let ci_high = percentile(&stats, 1.0 - tail);
    Ok(BootstrapOutcome {
        ci_low,
        ci_high,
        significant: ci_low > 0.0 || ci_high < 0.0,
    })
}

/// Paired bootstrap of mean(a) - mean(b) over per-instance statistics.
pub fn bootstrap_diff(
    per_instance_a: &[f64],
    per_instance_b: &[f64],
    config: &BootstrapConfig,
) -> Result<BootstrapOutcome> {
    if per_instance_a.len() != per_instance_b.len() {
        return Err(Error::Contract(format!(
            "bootstrap lists must align: {} vs {}",
            per_instance_a.len(),
            per_instance_b.len()
        )));
    }
    bootstrap_paired(per_instance_a.len(), config, |indices| {
        let mean_a: f64 = indices.iter().map(|&i| per_instance_a[i]).sum::<f64>();
        let mean_b: f64 = indices.iter().map(|&i| per_instance_b[i]).sum::<f64>();
        (mean_a - mean_b) / indices.len() as f64
    })
}

/// Empirical percentile with linear interpolation between closest ranks.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::judge::{JudgmentReplicate, Verdict};
    use crate::model::{Condition, DirectVerdict, PairwiseVerdict};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pairwise_set(votes: &[u8]) -> JudgmentSet {
        let replicates = votes
            .iter()
            .enumerate()
            .map(|(i, &label)| JudgmentReplicate {
                instance_id: "x".into(),
                condition: Condition::NoChecklist,
                replicate_index: i as u8,
                presentation_order: Some(crate::judge::PresentationOrder::for_replicate(i)),
                item_verdicts: None,
                final_verdict: Verdict::Pairwise(PairwiseVerdict {
                    choice: Choice::from_label(label).unwrap(),
                }),
                raw: String::new(),
            })
            .collect();
        JudgmentSet { instance_id: "x".into(), condition: Condition::NoChecklist, replicates }
    }

    fn direct_set(scores: &[u8]) -> JudgmentSet {
        let replicates = scores
            .iter()
            .enumerate()
            .map(|(i, &score)| JudgmentReplicate {
                instance_id: "x".into(),
                condition: Condition::NoChecklist,
                replicate_index: i as u8,
                presentation_order: None,
                item_verdicts: None,
                final_verdict: Verdict::Direct(DirectVerdict { score }),
                raw: String::new(),
            })
            .collect();
        JudgmentSet { instance_id: "x".into(), condition: Condition::NoChecklist, replicates }
    }

    #[test]
    fn majority_vote_wins() {
        let out = aggregate_pairwise(&pairwise_set(&[1, 1, 1, 1, 1, 1, 1, 2, 2, 2])).unwrap();
        assert_eq!(out.outcome, Outcome::Pairwise { result: PairwiseOutcome::Win1 });
        let out = aggregate_pairwise(&pairwise_set(&[1; 10])).unwrap();
        assert_eq!(out.outcome, Outcome::Pairwise { result: PairwiseOutcome::Win1 });
    }

    #[test]
    fn even_split_is_a_tie() {
        let out = aggregate_pairwise(&pairwise_set(&[1, 1, 1, 1, 1, 2, 2, 2, 2, 2])).unwrap();
        assert_eq!(out.outcome, Outcome::Pairwise { result: PairwiseOutcome::Tie });
    }

    #[test]
    fn direct_mean_and_round() {
        let out = aggregate_direct(&direct_set(&[3; 10])).unwrap();
        assert_eq!(out.outcome, Outcome::Direct { score: 3 });
        // mean 3.5 rounds away from zero to 4
        let out = aggregate_direct(&direct_set(&[3, 3, 3, 3, 3, 4, 4, 4, 4, 4])).unwrap();
        assert_eq!(out.outcome, Outcome::Direct { score: 4 });
        // mean 1.5 rounds to 2
        let out = aggregate_direct(&direct_set(&[1, 1, 1, 1, 1, 2, 2, 2, 2, 2])).unwrap();
        assert_eq!(out.outcome, Outcome::Direct { score: 2 });
    }

    fn pairwise_outcome(result: PairwiseOutcome) -> AggregatedOutcome {
        AggregatedOutcome { instance_id: "x".into(), outcome: Outcome::Pairwise { result } }
    }

    #[test]
    fn accuracy_examples() {
        let gold = GoldLabel::Pairwise { winner: Choice::One };
        let all_correct = vec![pairwise_outcome(PairwiseOutcome::Win1); 3];
        assert_eq!(accuracy(&all_correct, &vec![gold.clone(); 3]).unwrap(), 1.0);

        let one_tie = vec![pairwise_outcome(PairwiseOutcome::Tie)];
        assert_eq!(accuracy(&one_tie, &[gold.clone()]).unwrap(), 0.5);

        let mixed = vec![
            pairwise_outcome(PairwiseOutcome::Win1),
            pairwise_outcome(PairwiseOutcome::Win2),
            pairwise_outcome(PairwiseOutcome::Tie),
        ];
        assert_abs_diff_eq!(accuracy(&mixed, &vec![gold; 3]).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn accuracy_rejects_misalignment() {
        let gold = GoldLabel::Pairwise { winner: Choice::One };
        let outcomes = vec![pairwise_outcome(PairwiseOutcome::Win1)];
        assert!(accuracy(&outcomes, &[gold.clone(), gold]).is_err());
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn alpha_is_one_on_identical_lists() {
        let pairs: Vec<(u8, u8)> = vec![(1, 1), (2, 2), (3, 3), (5, 5), (4, 4), (2, 2)];
        for level in [AlphaLevel::Nominal, AlphaLevel::Ordinal, AlphaLevel::Interval] {
            let alpha = krippendorff_alpha(&pairs, level).unwrap();
            assert_eq!(alpha.value, 1.0);
            assert!(!alpha.degenerate);
        }
    }

    #[test]
    fn alpha_flags_degenerate_data() {
        let alpha = krippendorff_alpha(&[(3, 3), (3, 3)], AlphaLevel::Interval).unwrap();
        assert_eq!(alpha.value, 1.0);
        assert!(alpha.degenerate);
    }

    #[test]
    fn alpha_can_be_negative() {
        // hand computation: o(1,5)=o(5,1)=2, marginals n1=n5=2, n=4;
        // D_o = 64/4 = 16, D_e = 128/12, alpha = 1 - 1.5 = -0.5
        let alpha = krippendorff_alpha(&[(1, 5), (5, 1)], AlphaLevel::Interval).unwrap();
        assert_abs_diff_eq!(alpha.value, -0.5, epsilon = 1e-12);
    }

    #[test]
    fn alpha_matches_hand_computed_mixed_case() {
        // hand computation via the coincidence matrix: D_o = 0.5,
        // D_e = 32/56, alpha = 1 - 0.875 = 0.125
        let pairs = [(3, 3), (4, 4), (3, 4), (4, 3)];
        let alpha = krippendorff_alpha(&pairs, AlphaLevel::Interval).unwrap();
        assert_abs_diff_eq!(alpha.value, 0.125, epsilon = 1e-12);
    }

    #[test]
    fn bootstrap_identical_lists_never_significant() {
        let a: Vec<f64> = (0..20).map(|i| (i % 3) as f64).collect();
        let out = bootstrap_diff(&a, &a, &BootstrapConfig::default()).unwrap();
        assert!(!out.significant);
        assert_eq!(out.ci_low, 0.0);
        assert_eq!(out.ci_high, 0.0);
    }

    #[test]
    fn bootstrap_constant_shift_is_significant() {
        let b: Vec<f64> = (0..20).map(|i| (i % 4) as f64).collect();
        let a: Vec<f64> = b.iter().map(|v| v + 1.0).collect();
        let out = bootstrap_diff(&a, &b, &BootstrapConfig::default()).unwrap();
        assert!(out.significant);
        assert!(out.ci_low > 0.0);
    }

    #[test]
    fn bootstrap_is_deterministic_for_fixed_seed() {
        let a: Vec<f64> = vec![0.1, 0.9, 0.4, 0.6, 0.2, 0.8];
        let b: Vec<f64> = vec![0.3, 0.5, 0.5, 0.4, 0.3, 0.6];
        let x = bootstrap_diff(&a, &b, &BootstrapConfig::default()).unwrap();
        let y = bootstrap_diff(&a, &b, &BootstrapConfig::default()).unwrap();
        assert_eq!(x, y);
    }

    proptest! {
        #[test]
        fn aggregate_pairwise_is_order_invariant(ones in 0usize..=10, seed in any::<u64>()) {
            let mut votes = vec![1u8; ones];
            votes.extend(vec![2u8; 10 - ones]);
            let base = aggregate_pairwise(&pairwise_set(&votes)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..3 {
                for i in (1..votes.len()).rev() {
                    let j = rng.gen_range(0..=i);
                    votes.swap(i, j);
                }
                let shuffled = aggregate_pairwise(&pairwise_set(&votes)).unwrap();
                prop_assert_eq!(&base.outcome, &shuffled.outcome);
            }
        }

        #[test]
        fn alpha_never_exceeds_one(
            pairs in proptest::collection::vec((1u8..=5, 1u8..=5), 2..30),
            level_idx in 0usize..3,
        ) {
            let level = [AlphaLevel::Nominal, AlphaLevel::Ordinal, AlphaLevel::Interval][level_idx];
            let alpha = krippendorff_alpha(&pairs, level).unwrap();
            prop_assert!(alpha.value <= 1.0 + 1e-12);
        }

        #[test]
        fn bootstrap_ci_is_antisymmetric(
            diffs in proptest::collection::vec(-1.0f64..1.0, 3..15),
        ) {
            let b: Vec<f64> = diffs.iter().map(|_| 0.0).collect();
            let config = BootstrapConfig { iterations: 200, ..Default::default() };
            let fwd = bootstrap_diff(&diffs, &b, &config).unwrap();
            let rev = bootstrap_diff(&b, &diffs, &config).unwrap();
            prop_assert!((fwd.ci_low + rev.ci_high).abs() < 1e-12);
            prop_assert!((fwd.ci_high + rev.ci_low).abs() < 1e-12);
            prop_assert_eq!(fwd.significant, rev.significant);
        }
    }
}
