//! Two-step checklist ablation: classify whole checklists by how much they
//! move the mean judgment toward gold, then classify individual items by
//! leave-one-out re-evaluation. Neutral checklists are skipped entirely.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checklist::Checklist;
use crate::error::{Error, Result};
use crate::judge::{JudgeEngine, JudgmentSet, REPLICATES};
use crate::model::{Condition, EvalInstance, PolicyId, TaskKind};

/// Classification threshold defaults: pairwise 0.3, direct 1.5.
pub fn default_threshold(kind: TaskKind) -> f64 {
    match kind {
        TaskKind::Pairwise => 0.3,
        TaskKind::Direct => 1.5,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    Positive,
    Negative,
    Neutral,
}

impl std::fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClassLabel::Positive => write!(f, "positive"),
            ClassLabel::Negative => write!(f, "negative"),
            ClassLabel::Neutral => write!(f, "neutral"),
        }
    }
}

/// Whole-checklist classification by delta against the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChecklistClass {
    pub instance_id: String,
    pub policy: PolicyId,
    pub delta_all: f64,
    pub label: ClassLabel,
}

/// Per-item classification from leave-one-out re-evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemClass {
    pub instance_id: String,
    pub item_index: usize,
    pub delta_abl: f64,
    pub label: ClassLabel,
}

/// Mean of the ten replicate scores: Likert scores for direct sets, choice
/// labels (1 or 2) for pairwise sets.
pub fn mean_score(set: &JudgmentSet) -> Result<f64> {
    if set.replicates.len() != REPLICATES {
        return Err(Error::Contract(format!(
            "mean_score needs {REPLICATES} successful replicates, got {} for {}",
            set.replicates.len(),
            set.instance_id
        )));
    }
    let scores = set.scores();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// |gold - none| - |gold - all|: positive when the checklist moved the mean
/// judgment closer to gold.
pub fn delta_all(gold_mean: f64, none_mean: f64, all_mean: f64) -> f64 {
    (gold_mean - none_mean).abs() - (gold_mean - all_mean).abs()
}

/// |gold - all| - |gold - abl|: same improvement form with the full-checklist
/// mean in the reference slot, so both deltas share one implementation.
pub fn delta_abl(gold_mean: f64, all_mean: f64, abl_mean: f64) -> f64 {
    delta_all(gold_mean, all_mean, abl_mean)
}

/// Gold/none/all means for one (instance, policy) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChecklistScore {
    pub instance_id: String,
    pub policy: PolicyId,
    pub gold_mean: f64,
    pub none_mean: f64,
    pub all_mean: f64,
}

/// Label each checklist: positive when delta_all >= threshold, negative
/// when <= -threshold, else neutral. Boundary inclusive on both sides.
pub fn classify_checklists(
    scores: &[ChecklistScore],
    kind: TaskKind,
    threshold_override: Option<f64>,
) -> Vec<ChecklistClass> {
    let threshold = threshold_override.unwrap_or_else(|| default_threshold(kind));
    scores
        .iter()
        .map(|s| {
            let delta = delta_all(s.gold_mean, s.none_mean, s.all_mean);
            let label = if delta >= threshold {
                ClassLabel::Positive
            } else if delta <= -threshold {
                ClassLabel::Negative
            } else {
                ClassLabel::Neutral
            };
            ChecklistClass {
                instance_id: s.instance_id.clone(),
                policy: s.policy,
                delta_all: delta,
                label,
            }
        })
        .collect()
}

fn item_label(delta: f64) -> ClassLabel {
    if delta < 0.0 {
        ClassLabel::Positive
    } else if delta > 0.0 {
        ClassLabel::Negative
    } else {
        ClassLabel::Neutral
    }
}

/// Item-level results for one non-neutral checklist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemAblation {
    pub instance_id: String,
    pub policy: PolicyId,
    pub checklist_label: ClassLabel,
    pub classes: Vec<ItemClass>,
    /// Item indices whose leave-one-out set failed replication.
    pub unresolved: Vec<usize>,
}

/// Re-run the ten-replicate judgment once per removed item. The caller must
/// pass a positive or negative class: neutral checklists are skipped before
/// any model call is issued.
pub async fn ablate_items(
    instance: &EvalInstance,
    checklist: &Checklist,
    class: &ChecklistClass,
    engine: &JudgeEngine<'_>,
    gold_mean: f64,
    all_mean: f64,
) -> Result<ItemAblation> {
    if class.label == ClassLabel::Neutral {
        return Err(Error::Contract(format!(
            "ablate_items must not be called for neutral checklist {} ({})",
            class.instance_id, class.policy
        )));
    }
    // A single-item checklist cannot be reduced: judging with zero items is
    // undefined, so its sole item is reported unresolved without model calls.
    if checklist.items.len() < 2 {
        return Ok(ItemAblation {
            instance_id: instance.id.clone(),
            policy: checklist.policy,
            checklist_label: class.label,
            classes: Vec::new(),
            unresolved: vec![0],
        });
    }

    let condition = Condition::WithChecklist { policy: checklist.policy };
    let mut classes = Vec::new();
    let mut unresolved = Vec::new();
    for item in &checklist.items {
        let reduced = checklist.without_item(item.index);
        match engine.judge_instance(instance, condition, Some(&reduced)).await {
            Ok(set) => {
                let abl_mean = mean_score(&set)?;
                let delta = delta_abl(gold_mean, all_mean, abl_mean);
                classes.push(ItemClass {
                    instance_id: instance.id.clone(),
                    item_index: item.index,
                    delta_abl: delta,
                    label: item_label(delta),
                });
            }
            Err(Error::PartialSet { .. }) => unresolved.push(item.index),
            Err(other) => return Err(other),
        }
    }
    Ok(ItemAblation {
        instance_id: instance.id.clone(),
        policy: checklist.policy,
        checklist_label: class.label,
        classes,
        unresolved,
    })
}

/// Counts and fractions for the ablation report. Fractions over an empty
/// denominator are reported as absent, not zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub checklist_counts: LabelCounts,
    /// Items inside positive checklists: total and how many are positive items.
    pub items_in_positive: ItemFraction,
    /// Items inside negative checklists: total and how many are negative items.
    pub items_in_negative: ItemFraction,
    pub unresolved_items: usize,
    /// (bin lower edge, count) pairs over all item deltas, bin width 0.25.
    pub delta_histogram: Vec<(f64, usize)>,
    pub per_policy: BTreeMap<String, LabelCounts>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub positive: usize,
    pub negative: usize,
    pub neutral: usize,
}

impl LabelCounts {
    fn add(&mut self, label: ClassLabel) {
        match label {
            ClassLabel::Positive => self.positive += 1,
            ClassLabel::Negative => self.negative += 1,
            ClassLabel::Neutral => self.neutral += 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ItemFraction {
    pub matching: usize,
    pub total: usize,
    /// matching / total, absent when total is zero.
    pub fraction: Option<f64>,
}

impl ItemFraction {
    fn new(matching: usize, total: usize) -> Self {
        let fraction = if total == 0 {
            None
        } else {
            Some(matching as f64 / total as f64)
        };
        Self { matching, total, fraction }
    }
}

const HISTOGRAM_BIN_WIDTH: f64 = 0.25;

/// Assemble the report from checklist classes and item ablations.
pub fn ablation_report(classes: &[ChecklistClass], items: &[ItemAblation]) -> AblationReport {
    let mut checklist_counts = LabelCounts::default();
    let mut per_policy: BTreeMap<String, LabelCounts> = BTreeMap::new();
    for class in classes {
        checklist_counts.add(class.label);
        per_policy.entry(class.policy.as_str().to_string()).or_default().add(class.label);
    }

    let mut pos_total = 0;
    let mut pos_matching = 0;
    let mut neg_total = 0;
    let mut neg_matching = 0;
    let mut unresolved = 0;
    let mut deltas = Vec::new();
    for ablation in items {
        unresolved += ablation.unresolved.len();
        for item in &ablation.classes {
            deltas.push(item.delta_abl);
            match ablation.checklist_label {
                ClassLabel::Positive => {
                    pos_total += 1;
                    if item.label == ClassLabel::Positive {
                        pos_matching += 1;
                    }
                }
                ClassLabel::Negative => {
                    neg_total += 1;
                    if item.label == ClassLabel::Negative {
                        neg_matching += 1;
                    }
                }
                ClassLabel::Neutral => {}
            }
        }
    }

    AblationReport {
        checklist_counts,
        items_in_positive: ItemFraction::new(pos_matching, pos_total),
        items_in_negative: ItemFraction::new(neg_matching, neg_total),
        unresolved_items: unresolved,
        delta_histogram: histogram(&deltas),
        per_policy,
    }
}

fn histogram(deltas: &[f64]) -> Vec<(f64, usize)> {
    if deltas.is_empty() {
        return Vec::new();
    }
    let mut bins: BTreeMap<i64, usize> = BTreeMap::new();
    for &d in deltas {
        let bin = (d / HISTOGRAM_BIN_WIDTH).floor() as i64;
        *bins.entry(bin).or_insert(0) += 1;
    }
    bins.into_iter()
        .map(|(bin, count)| (bin as f64 * HISTOGRAM_BIN_WIDTH, count))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::judge::{JudgmentReplicate, Verdict};
    use crate::model::{Choice, DirectVerdict, PairwiseVerdict};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

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

    #[test]
    fn mean_score_examples() {
        assert_eq!(mean_score(&direct_set(&[4; 10])).unwrap(), 4.0);
        // seven votes for output 1, three for output 2: (7*1 + 3*2)/10
        let set = pairwise_set(&[1, 1, 1, 1, 1, 1, 1, 2, 2, 2]);
        assert_abs_diff_eq!(mean_score(&set).unwrap(), 1.3, epsilon = 1e-12);
        let split = pairwise_set(&[1, 1, 1, 1, 1, 2, 2, 2, 2, 2]);
        assert_abs_diff_eq!(mean_score(&split).unwrap(), 1.5, epsilon = 1e-12);
    }

    #[test]
    fn mean_score_requires_complete_sets() {
        assert!(mean_score(&direct_set(&[4; 7])).is_err());
    }

    #[test]
    fn delta_all_examples() {
        assert_eq!(delta_all(5.0, 3.0, 5.0), 2.0); // perfect correction
        assert_eq!(delta_all(4.0, 2.5, 2.5), 0.0); // none == all
        assert_eq!(delta_all(4.0, 4.0, 2.0), -2.0); // pure harm
    }

    fn score(id: &str, gold: f64, none: f64, all: f64) -> ChecklistScore {
        ChecklistScore {
            instance_id: id.into(),
            policy: PolicyId::Baseline,
            gold_mean: gold,
            none_mean: none,
            all_mean: all,
        }
    }

    #[test]
    fn classification_boundaries_are_inclusive() {
        // direct: delta_all = 1.5 exactly -> positive
        let classes = classify_checklists(&[score("a", 5.0, 3.5, 5.0)], TaskKind::Direct, None);
        assert_eq!(classes[0].label, ClassLabel::Positive);
        // direct: delta_all = -1.6 -> negative
        let classes = classify_checklists(&[score("a", 5.0, 4.6, 3.0)], TaskKind::Direct, None);
        assert_abs_diff_eq!(classes[0].delta_all, -1.6, epsilon = 1e-12);
        assert_eq!(classes[0].label, ClassLabel::Negative);
        // pairwise: delta_all = 0.2 -> neutral
        let classes = classify_checklists(&[score("a", 1.0, 1.3, 1.1)], TaskKind::Pairwise, None);
        assert_abs_diff_eq!(classes[0].delta_all, 0.2, epsilon = 1e-12);
        assert_eq!(classes[0].label, ClassLabel::Neutral);
    }

    #[test]
    fn threshold_override_applies() {
        let classes =
            classify_checklists(&[score("a", 5.0, 4.0, 5.0)], TaskKind::Direct, Some(1.0));
        assert_eq!(classes[0].label, ClassLabel::Positive);
    }

    #[test]
    fn item_rule_signs() {
        // removal moves the mean from all=3.0 to abl=5.0 with gold 5:
        // delta_abl = |5-3| - |5-5| = +2 -> negative item
        let delta = delta_abl(5.0, 3.0, 5.0);
        assert_eq!(delta, 2.0);
        assert_eq!(item_label(delta), ClassLabel::Negative);
        // removal pushes the mean away from gold -> positive item
        assert_eq!(item_label(delta_abl(5.0, 5.0, 3.0)), ClassLabel::Positive);
        // identical means -> neutral item
        assert_eq!(item_label(delta_abl(5.0, 4.0, 4.0)), ClassLabel::Neutral);
    }

    fn item(idx: usize, delta: f64) -> ItemClass {
        ItemClass {
            instance_id: "a".into(),
            item_index: idx,
            delta_abl: delta,
            label: item_label(delta),
        }
    }

    #[test]
    fn report_fractions_count_matching_items() {
        let classes = vec![ChecklistClass {
            instance_id: "a".into(),
            policy: PolicyId::Baseline,
            delta_all: 0.5,
            label: ClassLabel::Positive,
        }];
        let items = vec![ItemAblation {
            instance_id: "a".into(),
            policy: PolicyId::Baseline,
            checklist_label: ClassLabel::Positive,
            classes: vec![item(0, -0.2), item(1, -0.1), item(2, 0.3), item(3, 0.0)],
            unresolved: vec![],
        }];
        let report = ablation_report(&classes, &items);
        assert_eq!(report.items_in_positive.total, 4);
        assert_eq!(report.items_in_positive.matching, 2);
        assert_abs_diff_eq!(report.items_in_positive.fraction.unwrap(), 0.5, epsilon = 1e-12);
        // no negative checklists at all: fraction is undefined, not zero
        assert_eq!(report.items_in_negative.total, 0);
        assert!(report.items_in_negative.fraction.is_none());
    }

    #[test]
    fn report_with_all_neutral_checklists_is_empty() {
        let classes = vec![ChecklistClass {
            instance_id: "a".into(),
            policy: PolicyId::Baseline,
            delta_all: 0.0,
            label: ClassLabel::Neutral,
        }];
        let report = ablation_report(&classes, &[]);
        assert_eq!(report.checklist_counts.neutral, 1);
        assert_eq!(report.items_in_positive.total, 0);
        assert_eq!(report.items_in_negative.total, 0);
        assert!(report.delta_histogram.is_empty());
    }

    proptest! {
        #[test]
        fn delta_abl_is_delta_all_with_shifted_slots(
            gold in -5.0f64..5.0,
            all in -5.0f64..5.0,
            abl in -5.0f64..5.0,
        ) {
            prop_assert_eq!(delta_abl(gold, all, abl), delta_all(gold, all, abl));
        }

        #[test]
        fn delta_abl_decreases_as_abl_leaves_gold(
            gold in 1.0f64..5.0,
            all in 1.0f64..5.0,
            d1 in 0.0f64..2.0,
            d2 in 0.0f64..2.0,
        ) {
            // strictly decreasing in |gold - abl|
            let (near, far) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let delta_near = delta_abl(gold, all, gold + near);
            let delta_far = delta_abl(gold, all, gold + far);
            prop_assert!(delta_near >= delta_far - 1e-12);
            if far > near {
                prop_assert!(delta_near > delta_far - 1e-12);
            }
        }
    }
}
