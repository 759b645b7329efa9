//! Shared domain types: task kinds, instances, gold labels, and verdicts.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Whether an instance compares two responses or scores a single one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Pairwise,
    Direct,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TaskKind::Pairwise => write!(f, "pairwise"),
            TaskKind::Direct => write!(f, "direct"),
        }
    }
}

/// Checklist generation policy. Order matters: reports group by this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyId {
    Baseline,
    Specify,
    LengthHalf,
    LengthX1_5,
    SelfRefine,
    Ticking,
}

impl PolicyId {
    pub const ALL: [PolicyId; 6] = [
        PolicyId::Baseline,
        PolicyId::Specify,
        PolicyId::LengthHalf,
        PolicyId::LengthX1_5,
        PolicyId::SelfRefine,
        PolicyId::Ticking,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyId::Baseline => "baseline",
            PolicyId::Specify => "specify",
            PolicyId::LengthHalf => "length_half",
            PolicyId::LengthX1_5 => "length_x1_5",
            PolicyId::SelfRefine => "self_refine",
            PolicyId::Ticking => "ticking",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown policy {s:?}")))
    }
}

impl std::fmt::Display for PolicyId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One of the two responses in a pairwise instance, by original identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Choice {
    One,
    Two,
}

impl Choice {
    pub fn label(self) -> u8 {
        match self {
            Choice::One => 1,
            Choice::Two => 2,
        }
    }

    pub fn from_label(label: u8) -> Result<Self> {
        match label {
            1 => Ok(Choice::One),
            2 => Ok(Choice::Two),
            other => Err(Error::Validation(format!(
                "pairwise label must be 1 or 2, got {other}"
            ))),
        }
    }

    pub fn other(self) -> Self {
        match self {
            Choice::One => Choice::Two,
            Choice::Two => Choice::One,
        }
    }
}

impl Serialize for Choice {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_u8(self.label())
    }
}

impl<'de> Deserialize<'de> for Choice {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let label = u8::deserialize(deserializer)?;
        Choice::from_label(label).map_err(serde::de::Error::custom)
    }
}

/// Human gold label for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GoldLabel {
    Pairwise {
        winner: Choice,
    },
    Direct {
        annotations: [u8; 3],
        gold: u8,
    },
}

impl GoldLabel {
    pub fn kind(&self) -> TaskKind {
        match self {
            GoldLabel::Pairwise { .. } => TaskKind::Pairwise,
            GoldLabel::Direct { .. } => TaskKind::Direct,
        }
    }

    /// Mean score given by the human annotators: the winner label for
    /// pairwise, the unrounded mean of the three annotations for direct.
    pub fn gold_mean(&self) -> f64 {
        match self {
            GoldLabel::Pairwise { winner } => winner.label() as f64,
            GoldLabel::Direct { annotations, .. } => {
                annotations.iter().map(|&a| a as f64).sum::<f64>() / 3.0
            }
        }
    }
}

/// One pairwise or direct-scoring task with its gold label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub id: String,
    pub kind: TaskKind,
    pub input_text: String,
    pub outputs: Vec<String>,
    pub gold: GoldLabel,
    pub subset: String,
}

impl EvalInstance {
    pub fn validate(&self) -> Result<()> {
        let expected = match self.kind {
            TaskKind::Pairwise => 2,
            TaskKind::Direct => 1,
        };
        if self.outputs.len() != expected {
            return Err(Error::Validation(format!(
                "instance {}: {} task requires {} outputs, got {}",
                self.id,
                self.kind,
                expected,
                self.outputs.len()
            )));
        }
        if self.gold.kind() != self.kind {
            return Err(Error::Validation(format!(
                "instance {}: gold label kind does not match task kind {}",
                self.id, self.kind
            )));
        }
        if let GoldLabel::Direct { annotations, gold } = &self.gold {
            let expected_gold = derive_direct_gold(annotations)?;
            if *gold != expected_gold {
                return Err(Error::Validation(format!(
                    "instance {}: direct_gold {} does not match derived value {}",
                    self.id, gold, expected_gold
                )));
            }
        }
        Ok(())
    }
}

/// Verdict for a pairwise replicate, in original output identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairwiseVerdict {
    pub choice: Choice,
}

/// Verdict for a direct-scoring replicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectVerdict {
    pub score: u8,
}

impl DirectVerdict {
    pub fn new(score: u8) -> Result<Self> {
        if (1..=5).contains(&score) {
            Ok(Self { score })
        } else {
            Err(Error::Validation(format!(
                "direct score must be in [1,5], got {score}"
            )))
        }
    }
}

/// Per-checklist-item verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemVerdict {
    Yes,
    No,
    NotApplicable,
}

/// Evaluation condition: with a checklist from a given policy, or without.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Condition {
    NoChecklist,
    WithChecklist { policy: PolicyId },
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Condition::NoChecklist => write!(f, "no_checklist"),
            Condition::WithChecklist { policy } => write!(f, "with_checklist({policy})"),
        }
    }
}

/// Round half away from zero, the rounding rule used everywhere in the
/// harness (gold derivation, mean-of-ten aggregation, length targets).
pub fn round_half_away_from_zero(value: f64) -> f64 {
    value.round()
}

/// Gold label for a direct instance: round-half-away-from-zero of the mean
/// of the three annotations.
pub fn derive_direct_gold(annotations: &[u8]) -> Result<u8> {
    if annotations.len() != 3 {
        return Err(Error::Validation(format!(
            "direct annotations must have exactly 3 values, got {}",
            annotations.len()
        )));
    }
    for &a in annotations {
        if !(1..=5).contains(&a) {
            return Err(Error::Validation(format!(
                "direct annotation must be in [1,5], got {a}"
            )));
        }
    }
    let mean = annotations.iter().map(|&a| a as f64).sum::<f64>() / 3.0;
    Ok(round_half_away_from_zero(mean) as u8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn direct_gold_unanimous() {
        assert_eq!(derive_direct_gold(&[5, 5, 5]).unwrap(), 5);
    }

    #[test]
    fn direct_gold_rounds_down() {
        // mean 3.333
        assert_eq!(derive_direct_gold(&[3, 3, 4]).unwrap(), 3);
    }

    #[test]
    fn direct_gold_rounds_up() {
        // mean 3.667
        assert_eq!(derive_direct_gold(&[3, 4, 4]).unwrap(), 4);
    }

    #[test]
    fn direct_gold_rejects_wrong_count() {
        assert!(derive_direct_gold(&[3, 3]).is_err());
        assert!(derive_direct_gold(&[3, 3, 3, 3]).is_err());
    }

    #[test]
    fn direct_gold_rejects_out_of_range() {
        assert!(derive_direct_gold(&[3, 3, 6]).is_err());
        assert!(derive_direct_gold(&[0, 3, 3]).is_err());
    }

    #[test]
    fn instance_validation_checks_output_count() {
        let inst = EvalInstance {
            id: "x".into(),
            kind: TaskKind::Pairwise,
            input_text: "t".into(),
            outputs: vec!["a".into()],
            gold: GoldLabel::Pairwise { winner: Choice::One },
            subset: "s".into(),
        };
        assert!(inst.validate().is_err());
    }

    #[test]
    fn gold_mean_matches_definitions() {
        let pairwise = GoldLabel::Pairwise { winner: Choice::Two };
        assert_eq!(pairwise.gold_mean(), 2.0);
        let direct = GoldLabel::Direct { annotations: [3, 3, 4], gold: 3 };
        assert!((direct.gold_mean() - 10.0 / 3.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn direct_gold_permutation_invariant(a in 1u8..=5, b in 1u8..=5, c in 1u8..=5) {
            let base = derive_direct_gold(&[a, b, c]).unwrap();
            for perm in [[a, c, b], [b, a, c], [b, c, a], [c, a, b], [c, b, a]] {
                prop_assert_eq!(derive_direct_gold(&perm).unwrap(), base);
            }
        }

        #[test]
        fn direct_gold_within_annotation_bounds(a in 1u8..=5, b in 1u8..=5, c in 1u8..=5) {
            let gold = derive_direct_gold(&[a, b, c]).unwrap();
            let lo = a.min(b).min(c);
            let hi = a.max(b).max(c);
            prop_assert!(gold >= lo && gold <= hi);
        }
    }
}
