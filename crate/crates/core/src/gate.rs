//! Selective checklist application: inconsistency metrics over no-checklist
//! judgment sets and the threshold gate deciding which judgment counts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::judge::{JudgmentSet, REPLICATES};
use crate::model::TaskKind;

/// Legal thresholds for pairwise tasks.
pub const PAIRWISE_GRID: [f64; 5] = [1.0, 2.0, 3.0, 4.0, 5.0];
/// Legal thresholds for direct-scoring tasks.
pub const DIRECT_GRID: [f64; 7] = [0.3, 0.35, 0.4, 0.45, 0.5, 0.6, 0.7];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    None,
    All,
    Selective,
}

impl std::fmt::Display for GateMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GateMode::None => write!(f, "none"),
            GateMode::All => write!(f, "all"),
            GateMode::Selective => write!(f, "selective"),
        }
    }
}

/// Gate policy: never / always / apply when inconsistency >= k.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatePolicy {
    pub mode: GateMode,
    pub k: Option<f64>,
}

impl GatePolicy {
    pub fn none() -> Self {
        Self { mode: GateMode::None, k: None }
    }

    pub fn all() -> Self {
        Self { mode: GateMode::All, k: None }
    }

    pub fn selective(k: f64) -> Self {
        Self { mode: GateMode::Selective, k: Some(k) }
    }

    pub fn validate(&self, kind: TaskKind) -> Result<()> {
        match self.mode {
            GateMode::Selective => {
                let k = self.k.ok_or_else(|| {
                    Error::Validation("selective gate requires a threshold k".into())
                })?;
                let grid: &[f64] = match kind {
                    TaskKind::Pairwise => &PAIRWISE_GRID,
                    TaskKind::Direct => &DIRECT_GRID,
                };
                if !grid.contains(&k) {
                    return Err(Error::Validation(format!(
                        "threshold {k} is not in the legal {kind} grid {grid:?}"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Per-instance gate outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub instance_id: String,
    pub inconsistency: f64,
    pub applied: bool,
}

/// Number of votes the less-preferred response receives, in [0,5].
pub fn inconsistency_pairwise(set: &JudgmentSet) -> Result<u32> {
    if set.kind()? != TaskKind::Pairwise {
        return Err(Error::Contract(format!(
            "inconsistency_pairwise needs a pairwise set, got {} for {}",
            set.kind()?,
            set.instance_id
        )));
    }
    if set.replicates.len() != REPLICATES {
        return Err(Error::Contract(format!(
            "inconsistency_pairwise needs {REPLICATES} replicates, got {} for {}",
            set.replicates.len(),
            set.instance_id
        )));
    }
    let (one, two) = set.vote_counts()?;
    Ok(one.min(two))
}

/// Population standard deviation of the replicate scores.
pub fn inconsistency_direct(set: &JudgmentSet) -> Result<f64> {
    if set.kind()? != TaskKind::Direct {
        return Err(Error::Contract(format!(
            "inconsistency_direct needs a direct set, got {} for {}",
            set.kind()?,
            set.instance_id
        )));
    }
    Ok(population_std(&set.scores()))
}

/// Population (n-divisor) standard deviation.
pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    variance.sqrt()
}

/// Inconsistency of a no-checklist set under its task kind.
pub fn inconsistency(set: &JudgmentSet) -> Result<f64> {
    match set.kind()? {
        TaskKind::Pairwise => Ok(inconsistency_pairwise(set)? as f64),
        TaskKind::Direct => inconsistency_direct(set),
    }
}

/// Decide which judgment set is in effect for one instance.
pub fn gate<'a>(
    policy: GatePolicy,
    no_checklist_set: &'a JudgmentSet,
    with_checklist_set: &'a JudgmentSet,
) -> Result<(GateDecision, &'a JudgmentSet)> {
    if no_checklist_set.instance_id != with_checklist_set.instance_id {
        return Err(Error::Contract(format!(
            "gate sets belong to different instances: {} vs {}",
            no_checklist_set.instance_id, with_checklist_set.instance_id
        )));
    }
    let x = inconsistency(no_checklist_set)?;
    let applied = match policy.mode {
        GateMode::None => false,
        GateMode::All => true,
        GateMode::Selective => {
            let k = policy
                .k
                .ok_or_else(|| Error::Contract("selective gate without threshold".into()))?;
            x >= k
        }
    };
    let decision = GateDecision {
        instance_id: no_checklist_set.instance_id.clone(),
        inconsistency: x,
        applied,
    };
    let effective = if applied { with_checklist_set } else { no_checklist_set };
    Ok((decision, effective))
}

/// Fraction of decisions that applied the checklist.
pub fn application_rate(decisions: &[GateDecision]) -> Result<f64> {
    if decisions.is_empty() {
        return Err(Error::Contract(
            "application_rate needs at least one decision".into(),
        ));
    }
    let applied = decisions.iter().filter(|d| d.applied).count();
    Ok(applied as f64 / decisions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::judge::{JudgmentReplicate, Verdict};
    use crate::model::{Choice, Condition, DirectVerdict, PairwiseVerdict};
    use proptest::prelude::*;

    pub(crate) fn pairwise_set(id: &str, votes: &[u8]) -> JudgmentSet {
        let replicates = votes
            .iter()
            .enumerate()
            .map(|(i, &label)| JudgmentReplicate {
                instance_id: id.into(),
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
        JudgmentSet { instance_id: id.into(), condition: Condition::NoChecklist, replicates }
    }

    pub(crate) fn direct_set(id: &str, scores: &[u8]) -> JudgmentSet {
        let replicates = scores
            .iter()
            .enumerate()
            .map(|(i, &score)| JudgmentReplicate {
                instance_id: id.into(),
                condition: Condition::NoChecklist,
                replicate_index: i as u8,
                presentation_order: None,
                item_verdicts: None,
                final_verdict: Verdict::Direct(DirectVerdict { score }),
                raw: String::new(),
            })
            .collect();
        JudgmentSet { instance_id: id.into(), condition: Condition::NoChecklist, replicates }
    }

    #[test]
    fn pairwise_worked_examples() {
        // three dissenting votes
        let set = pairwise_set("a", &[1, 1, 1, 1, 1, 1, 1, 2, 2, 2]);
        assert_eq!(inconsistency_pairwise(&set).unwrap(), 3);
        // maximal split
        let set = pairwise_set("a", &[1, 1, 1, 1, 1, 2, 2, 2, 2, 2]);
        assert_eq!(inconsistency_pairwise(&set).unwrap(), 5);
    }

    #[test]
    fn unanimous_votes_have_zero_inconsistency() {
        let set = pairwise_set("a", &[1; 10]);
        assert_eq!(inconsistency_pairwise(&set).unwrap(), 0);
    }

    #[test]
    fn direct_worked_examples() {
        let set = direct_set("a", &[3, 3, 3, 3, 4]);
        assert!((inconsistency_direct(&set).unwrap() - 0.4).abs() < 1e-12);
        let set = direct_set("a", &[2, 3, 3, 3, 4]);
        assert!((inconsistency_direct(&set).unwrap() - 0.6324555320336759).abs() < 1e-12);
    }

    #[test]
    fn constant_scores_have_zero_inconsistency() {
        let set = direct_set("a", &[4; 10]);
        assert_eq!(inconsistency_direct(&set).unwrap(), 0.0);
    }

    #[test]
    fn wrong_kind_is_a_contract_error() {
        let set = direct_set("a", &[3; 10]);
        assert!(matches!(inconsistency_pairwise(&set), Err(Error::Contract(_))));
        let set = pairwise_set("a", &[1; 10]);
        assert!(matches!(inconsistency_direct(&set), Err(Error::Contract(_))));
    }

    #[test]
    fn gate_boundary_is_inclusive() {
        let no = pairwise_set("a", &[1, 1, 1, 1, 1, 1, 1, 2, 2, 2]); // x = 3
        let with = pairwise_set("a", &[1; 10]);
        let (d, eff) = gate(GatePolicy::selective(3.0), &no, &with).unwrap();
        assert!(d.applied);
        assert_eq!(eff, &with);
        let (d, eff) = gate(GatePolicy::selective(4.0), &no, &with).unwrap();
        assert!(!d.applied);
        assert_eq!(eff, &no);
    }

    #[test]
    fn mode_none_never_applies() {
        let no = pairwise_set("a", &[1, 1, 1, 1, 1, 2, 2, 2, 2, 2]);
        let with = pairwise_set("a", &[1; 10]);
        let (d, eff) = gate(GatePolicy::none(), &no, &with).unwrap();
        assert!(!d.applied);
        assert_eq!(eff, &no);
        let (d, _) = gate(GatePolicy::all(), &no, &with).unwrap();
        assert!(d.applied);
    }

    #[test]
    fn mismatched_instances_are_a_contract_error() {
        let no = pairwise_set("a", &[1; 10]);
        let with = pairwise_set("b", &[1; 10]);
        assert!(matches!(gate(GatePolicy::all(), &no, &with), Err(Error::Contract(_))));
    }

    #[test]
    fn application_rate_counts() {
        let decisions: Vec<GateDecision> = (0..10)
            .map(|i| GateDecision {
                instance_id: format!("i{i}"),
                inconsistency: 0.0,
                applied: i < 3,
            })
            .collect();
        assert!((application_rate(&decisions).unwrap() - 0.3).abs() < 1e-12);
        let all: Vec<_> = decisions.iter().cloned().map(|mut d| { d.applied = true; d }).collect();
        assert_eq!(application_rate(&all).unwrap(), 1.0);
        let none: Vec<_> = decisions.iter().cloned().map(|mut d| { d.applied = false; d }).collect();
        assert_eq!(application_rate(&none).unwrap(), 0.0);
        assert!(application_rate(&[]).is_err());
    }

    #[test]
    fn grid_validation() {
        assert!(GatePolicy::selective(3.0).validate(TaskKind::Pairwise).is_ok());
        assert!(GatePolicy::selective(0.35).validate(TaskKind::Direct).is_ok());
        assert!(GatePolicy::selective(0.35).validate(TaskKind::Pairwise).is_err());
        assert!(GatePolicy::selective(2.0).validate(TaskKind::Direct).is_err());
        assert!(GatePolicy { mode: GateMode::Selective, k: None }.validate(TaskKind::Direct).is_err());
    }

    proptest! {
        #[test]
        fn pairwise_inconsistency_is_relabel_symmetric(ones in 0usize..=10) {
            let mut votes = vec![1u8; ones];
            votes.extend(vec![2u8; 10 - ones]);
            let flipped: Vec<u8> = votes.iter().map(|&v| 3 - v).collect();
            let a = inconsistency_pairwise(&pairwise_set("a", &votes)).unwrap();
            let b = inconsistency_pairwise(&pairwise_set("a", &flipped)).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn application_rate_non_increasing_in_k(xs in proptest::collection::vec(0u32..=5, 1..40)) {
            let mut last_rate = f64::INFINITY;
            for k in PAIRWISE_GRID {
                let decisions: Vec<GateDecision> = xs
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| GateDecision {
                        instance_id: format!("i{i}"),
                        inconsistency: x as f64,
                        applied: (x as f64) >= k,
                    })
                    .collect();
                let rate = application_rate(&decisions).unwrap();
                prop_assert!(rate <= last_rate + 1e-12);
                last_rate = rate;
            }
        }
    }
}
