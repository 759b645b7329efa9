//! Dataset ingestion: line-delimited JSON records, validation, gold-label
//! derivation, and filtering to instances with count-consistent checklists.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::checklist::Checklist;
use crate::error::{Error, Result};
use crate::model::{derive_direct_gold, Choice, EvalInstance, GoldLabel, TaskKind};

/// Where a dataset lives and how to read it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: TaskKind,
    pub path: PathBuf,
    #[serde(default)]
    pub subset_filter: Option<Vec<String>>,
}

#[derive(Debug, Deserialize)]
struct PairwiseRecord {
    id: String,
    input: String,
    output_1: String,
    output_2: String,
    gold_winner: u8,
    subset: String,
}

#[derive(Debug, Deserialize)]
struct DirectRecord {
    id: String,
    input: String,
    output: String,
    annotations: Vec<u8>,
    subset: String,
    #[serde(default)]
    #[allow(dead_code)] // informational field, accepted but unused
    generator_model: Option<String>,
}

/// Load, validate, and (for direct tasks) derive gold labels. Returned
/// order is file order.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<Vec<EvalInstance>> {
    let text = std::fs::read_to_string(&manifest.path).map_err(|e| {
        Error::Validation(format!(
            "cannot read dataset {}: {e}",
            manifest.path.display()
        ))
    })?;

    let mut instances = Vec::new();
    let mut seen_ids = BTreeSet::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let instance = parse_record(line, manifest.kind)
            .map_err(|e| Error::Validation(format!("record at line {}: {e}", line_no + 1)))?;
        if !seen_ids.insert(instance.id.clone()) {
            return Err(Error::Validation(format!(
                "duplicate instance id {} at line {}",
                instance.id,
                line_no + 1
            )));
        }
        instances.push(instance);
    }

    if let Some(filter) = &manifest.subset_filter {
        let present: BTreeSet<&str> = instances.iter().map(|i| i.subset.as_str()).collect();
        for tag in filter {
            if !present.contains(tag.as_str()) {
                return Err(Error::Validation(format!(
                    "subset_filter tag {tag:?} matches no record in {}",
                    manifest.path.display()
                )));
            }
        }
        let keep: BTreeSet<&str> = filter.iter().map(String::as_str).collect();
        instances.retain(|i| keep.contains(i.subset.as_str()));
    }

    Ok(instances)
}

fn parse_record(line: &str, kind: TaskKind) -> Result<EvalInstance> {
    let instance = match kind {
        TaskKind::Pairwise => {
            let rec: PairwiseRecord = serde_json::from_str(line)?;
            EvalInstance {
                gold: GoldLabel::Pairwise {
                    winner: Choice::from_label(rec.gold_winner)
                        .map_err(|e| Error::Validation(format!("instance {}: {e}", rec.id)))?,
                },
                id: rec.id,
                kind,
                input_text: rec.input,
                outputs: vec![rec.output_1, rec.output_2],
                subset: rec.subset,
            }
        }
        TaskKind::Direct => {
            let rec: DirectRecord = serde_json::from_str(line)?;
            let gold = derive_direct_gold(&rec.annotations)
                .map_err(|e| Error::Validation(format!("instance {}: {e}", rec.id)))?;
            let mut annotations = [0u8; 3];
            annotations.copy_from_slice(&rec.annotations);
            EvalInstance {
                id: rec.id,
                kind,
                input_text: rec.input,
                outputs: vec![rec.output],
                gold: GoldLabel::Direct { annotations, gold },
                subset: rec.subset,
            }
        }
    };
    instance.validate()?;
    Ok(instance)
}

/// Retention accounting emitted by [`filter_count_consistent`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetentionReport {
    pub total: usize,
    pub kept: usize,
    pub dropped: usize,
    /// Instance ids dropped, with the mismatched counts that caused it.
    pub dropped_ids: Vec<DroppedInstance>,
    /// For each policy present in the checklist map: ids checked & consistent.
    pub per_policy: BTreeMap<String, PolicyRetention>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DroppedInstance {
    pub id: String,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct PolicyRetention {
    pub checked: usize,
    pub consistent: usize,
}

impl RetentionReport {
    pub fn retention_rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.kept as f64 / self.total as f64
        }
    }
}

/// Keep exactly the instances whose listed checklists all have the same
/// item count. Instances missing from the map are dropped. Output is a
/// subsequence of the input (order preserved, no duplication).
pub fn filter_count_consistent(
    instances: &[EvalInstance],
    checklists: &BTreeMap<String, Vec<Checklist>>,
) -> (Vec<EvalInstance>, RetentionReport) {
    let mut kept = Vec::new();
    let mut dropped_ids = Vec::new();
    let mut per_policy: BTreeMap<String, PolicyRetention> = BTreeMap::new();

    for instance in instances {
        let lists = match checklists.get(&instance.id) {
            Some(lists) if !lists.is_empty() => lists,
            _ => {
                dropped_ids.push(DroppedInstance { id: instance.id.clone(), counts: vec![] });
                continue;
            }
        };
        let counts: Vec<usize> = lists.iter().map(|c| c.items.len()).collect();
        let consistent = counts.windows(2).all(|w| w[0] == w[1]);

        let mut by_policy: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for checklist in lists {
            by_policy
                .entry(checklist.policy.as_str())
                .or_default()
                .push(checklist.items.len());
        }
        for (policy, policy_counts) in &by_policy {
            let entry = per_policy.entry(policy.to_string()).or_default();
            entry.checked += 1;
            if policy_counts.windows(2).all(|w| w[0] == w[1]) {
                entry.consistent += 1;
            }
        }

        if consistent {
            kept.push(instance.clone());
        } else {
            dropped_ids.push(DroppedInstance { id: instance.id.clone(), counts });
        }
    }

    let report = RetentionReport {
        total: instances.len(),
        kept: kept.len(),
        dropped: instances.len() - kept.len(),
        dropped_ids,
        per_policy,
    };
    (kept, report)
}
