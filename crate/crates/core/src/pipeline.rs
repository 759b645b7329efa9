//! Pipeline commands over a run directory: gen, judge, sweep, ablate.
//!
//! Every artifact is line-delimited or tabular UTF-8 text written in a
//! deterministic order, so a full run in replay mode is byte-identical
//! across repetitions and re-running any command changes no stored bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};

use crate::ablation::{
    ablate_items, ablation_report, classify_checklists, delta_all, mean_score, AblationReport,
    ChecklistClass, ChecklistScore, ClassLabel, ItemAblation,
};
use crate::checklist::{
    template_hash, Checklist, ChecklistGenerator, ChecklistItem, ScaleFactor,
};
use crate::client::{sha256_hex, CallStats, LlmClient};
use crate::config::{DirectBootstrapMode, RunConfig};
use crate::dataset::{filter_count_consistent, load_dataset, RetentionReport};
use crate::error::{Error, Result};
use crate::gate::{application_rate, gate, GateDecision, GateMode, GatePolicy};
use crate::judge::{
    judge_template_hash, JudgeEngine, JudgmentReplicate, JudgmentSet, PresentationOrder, Verdict,
    REPLICATES,
};
use crate::metrics::{
    accuracy, aggregate_direct, aggregate_pairwise, bootstrap_diff, bootstrap_paired,
    instance_accuracy_score, krippendorff_alpha, BootstrapOutcome,
};
use crate::model::{Condition, EvalInstance, GoldLabel, ItemVerdict, PolicyId, TaskKind};

pub const CONFIG_ECHO_FILE: &str = "config.json";
pub const CHECKLISTS_FILE: &str = "checklists.jsonl";
pub const RETENTION_FILE: &str = "retention.json";
pub const JUDGMENTS_FILE: &str = "judgments.jsonl";
pub const JUDGE_REPORT_FILE: &str = "judge_report.json";
pub const GATE_DECISIONS_FILE: &str = "gate_decisions.jsonl";
pub const SWEEP_FILE: &str = "sweep.tsv";
pub const ABLATION_CHECKLISTS_FILE: &str = "ablation_checklists.tsv";
pub const ABLATION_ITEMS_FILE: &str = "ablation_items.tsv";
pub const ABLATION_SUMMARY_FILE: &str = "ablation_summary.json";

/// One line of the checklist store.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChecklistRecord {
    pub instance_id: String,
    pub policy: PolicyId,
    pub items: Vec<String>,
    pub generation_attempt: u32,
    pub template_hash: String,
    pub refine_feedback: Option<String>,
    pub raw_outputs: Vec<String>,
}

impl ChecklistRecord {
    pub fn to_checklist(&self) -> Checklist {
        Checklist {
            instance_id: self.instance_id.clone(),
            policy: self.policy,
            items: self
                .items
                .iter()
                .enumerate()
                .map(|(i, text)| ChecklistItem { text: text.clone(), index: i })
                .collect(),
            generation_attempt: self.generation_attempt,
            refine_feedback: self.refine_feedback.clone(),
        }
    }
}

/// One line of the run record: a single replicate, with the raw model text
/// replaced by its hash (the full text lives in the cassette).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub instance_id: String,
    pub condition: Condition,
    pub replicate_index: u8,
    pub presentation_order: Option<PresentationOrder>,
    pub item_verdicts: Option<Vec<ItemVerdict>>,
    pub final_verdict: Verdict,
    pub raw_sha256: String,
}

impl ReplicateRecord {
    fn from_replicate(r: &JudgmentReplicate) -> Self {
        Self {
            instance_id: r.instance_id.clone(),
            condition: r.condition,
            replicate_index: r.replicate_index,
            presentation_order: r.presentation_order,
            item_verdicts: r.item_verdicts.clone(),
            final_verdict: r.final_verdict,
            raw_sha256: sha256_hex(&r.raw),
        }
    }

    fn to_replicate(&self) -> JudgmentReplicate {
        JudgmentReplicate {
            instance_id: self.instance_id.clone(),
            condition: self.condition,
            replicate_index: self.replicate_index,
            presentation_order: self.presentation_order,
            item_verdicts: self.item_verdicts.clone(),
            final_verdict: self.final_verdict,
            raw: String::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GenFailure {
    pub instance_id: String,
    pub policy: PolicyId,
    pub message: String,
}

#[derive(Debug, Serialize)]
pub struct GenSummary {
    pub instances: usize,
    pub stored: usize,
    pub failures: Vec<GenFailure>,
    pub retention: RetentionReport,
    pub call_stats: CallStats,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IncompleteSet {
    pub instance_id: String,
    pub condition: Condition,
    pub failed_indices: Vec<u8>,
}

#[derive(Debug, Serialize)]
pub struct JudgeSummary {
    pub instances_judged: usize,
    pub sets_reused: usize,
    pub sets_judged: usize,
    pub incomplete: Vec<IncompleteSet>,
    pub call_stats: CallStats,
}

/// Run-invariant judge report persisted next to the run record.
#[derive(Debug, Serialize, Deserialize)]
struct JudgeReportFile {
    kind: TaskKind,
    instances: Vec<String>,
    conditions: Vec<Condition>,
    incomplete: Vec<IncompleteSet>,
    template_hashes: BTreeMap<String, String>,
}

fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<bool> {
    if let Ok(existing) = std::fs::read(path) {
        if existing == bytes {
            return Ok(false);
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(true)
}

fn jsonl<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for row in rows {
        out.extend(serde_json::to_vec(&row)?);
        out.push(b'\n');
    }
    Ok(out)
}

fn echo_config(config: &RunConfig) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(config)?;
    bytes.push(b'\n');
    write_if_changed(&config.out_dir.join(CONFIG_ECHO_FILE), &bytes)?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(line).map_err(|e| {
            Error::Validation(format!("{} line {}: {e}", path.display(), line_no + 1))
        })?;
        rows.push(row);
    }
    Ok(rows)
}

fn require_artifact(path: &Path, command: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::Validation(format!(
            "missing {}; run the `{command}` command first",
            path.display()
        )));
    }
    Ok(())
}

/// Generate checklists for every instance under every requested policy.
/// A baseline checklist is generated (and stored) whenever a scaled or
/// self-refine policy needs one, even if baseline itself was not requested.
pub async fn cmd_gen(config: &RunConfig) -> Result<GenSummary> {
    config.validate()?;
    let instances = load_dataset(&config.dataset)?;
    std::fs::create_dir_all(&config.out_dir)?;
    echo_config(config)?;

    let client = LlmClient::new(config.gen_endpoint.to_endpoint())?;
    let cassette = config.cassette();
    let generator = ChecklistGenerator {
        client: &client,
        cassette: &cassette,
        temperature: config.gen_temperature,
    };
    let requested = config.ordered_policies();
    let needs_baseline = requested.iter().any(|p| {
        matches!(
            p,
            PolicyId::Baseline | PolicyId::LengthHalf | PolicyId::LengthX1_5 | PolicyId::SelfRefine
        )
    });

    let concurrency = config.gen_endpoint.max_concurrency.max(1);
    let generator_ref = &generator;
    let requested_ref = &requested;
    let mut per_instance: Vec<(usize, Vec<ChecklistRecord>, Vec<GenFailure>)> =
        stream::iter(instances.iter().enumerate().map(|(idx, instance)| async move {
            let (records, failures) =
                generate_for_instance(generator_ref, instance, requested_ref, needs_baseline)
                    .await;
            (idx, records, failures)
        }))
        .buffer_unordered(concurrency)
        .collect()
        .await;
    per_instance.sort_by_key(|(idx, _, _)| *idx);

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (_, mut instance_records, mut instance_failures) in per_instance {
        records.append(&mut instance_records);
        failures.append(&mut instance_failures);
    }

    write_if_changed(&config.out_dir.join(CHECKLISTS_FILE), &jsonl(&records)?)?;

    let (_, retention) = compute_retention(&instances, &records, &requested);
    let mut retention_bytes = serde_json::to_vec_pretty(&retention)?;
    retention_bytes.push(b'\n');
    write_if_changed(&config.out_dir.join(RETENTION_FILE), &retention_bytes)?;

    Ok(GenSummary {
        instances: instances.len(),
        stored: records.len(),
        failures,
        retention,
        call_stats: client.stats(),
    })
}

async fn generate_for_instance(
    generator: &ChecklistGenerator<'_>,
    instance: &EvalInstance,
    requested: &[PolicyId],
    needs_baseline: bool,
) -> (Vec<ChecklistRecord>, Vec<GenFailure>) {
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut record = |outcome: crate::checklist::GenerationOutcome| {
        let checklist = outcome.checklist;
        records.push(ChecklistRecord {
            instance_id: checklist.instance_id.clone(),
            policy: checklist.policy,
            items: checklist.items.iter().map(|i| i.text.clone()).collect(),
            generation_attempt: checklist.generation_attempt,
            template_hash: template_hash(checklist.policy),
            refine_feedback: checklist.refine_feedback.clone(),
            raw_outputs: outcome.raw_outputs,
        });
        checklist
    };

    let mut baseline: Option<Checklist> = None;
    if needs_baseline {
        match generator.generate(instance, PolicyId::Baseline).await {
            Ok(outcome) => baseline = Some(record(outcome)),
            Err(e) => failures.push(GenFailure {
                instance_id: instance.id.clone(),
                policy: PolicyId::Baseline,
                message: e.to_string(),
            }),
        }
    }

    for &policy in requested {
        let result = match policy {
            PolicyId::Baseline => continue, // handled above
            PolicyId::Specify | PolicyId::Ticking => generator.generate(instance, policy).await,
            PolicyId::LengthHalf | PolicyId::LengthX1_5 => match &baseline {
                Some(baseline) => {
                    let factor = ScaleFactor::for_policy(policy).expect("scaled policy");
                    generator.generate_scaled(instance, baseline, factor).await
                }
                None => continue, // baseline failed; already reported
            },
            PolicyId::SelfRefine => match &baseline {
                Some(baseline) => generator.self_refine(instance, baseline).await,
                None => continue,
            },
        };
        match result {
            Ok(outcome) => {
                record(outcome);
            }
            Err(e) => failures.push(GenFailure {
                instance_id: instance.id.clone(),
                policy,
                message: e.to_string(),
            }),
        }
    }
    (records, failures)
}

/// Intersection of per-policy count-consistency over the requested policies:
/// an instance is retained iff every requested policy has checklists for it
/// and each policy's checklists agree on item count.
pub fn compute_retention(
    instances: &[EvalInstance],
    records: &[ChecklistRecord],
    policies: &[PolicyId],
) -> (Vec<EvalInstance>, RetentionReport) {
    let mut kept_ids: Option<BTreeSet<String>> = None;
    let mut per_policy = BTreeMap::new();
    let mut drop_counts: BTreeMap<String, Vec<usize>> = BTreeMap::new();

    for &policy in policies {
        let mut map: BTreeMap<String, Vec<Checklist>> = BTreeMap::new();
        for record in records.iter().filter(|r| r.policy == policy) {
            map.entry(record.instance_id.clone())
                .or_default()
                .push(record.to_checklist());
        }
        let (kept, report) = filter_count_consistent(instances, &map);
        for dropped in &report.dropped_ids {
            drop_counts
                .entry(dropped.id.clone())
                .or_insert_with(|| dropped.counts.clone());
        }
        for (name, counts) in report.per_policy {
            per_policy.insert(name, counts);
        }
        let ids: BTreeSet<String> = kept.into_iter().map(|i| i.id).collect();
        kept_ids = Some(match kept_ids {
            Some(acc) => acc.intersection(&ids).cloned().collect(),
            None => ids,
        });
    }

    let kept_ids = kept_ids.unwrap_or_default();
    let kept: Vec<EvalInstance> = instances
        .iter()
        .filter(|i| kept_ids.contains(&i.id))
        .cloned()
        .collect();
    let dropped_ids = instances
        .iter()
        .filter(|i| !kept_ids.contains(&i.id))
        .map(|i| crate::dataset::DroppedInstance {
            id: i.id.clone(),
            counts: drop_counts.get(&i.id).cloned().unwrap_or_default(),
        })
        .collect();
    let report = RetentionReport {
        total: instances.len(),
        kept: kept.len(),
        dropped: instances.len() - kept.len(),
        dropped_ids,
        per_policy,
    };
    (kept, report)
}

fn load_checklists(config: &RunConfig) -> Result<Vec<ChecklistRecord>> {
    let path = config.out_dir.join(CHECKLISTS_FILE);
    require_artifact(&path, "gen")?;
    read_jsonl(&path)
}

fn conditions_for(config: &RunConfig) -> Vec<Condition> {
    let mut conditions = vec![Condition::NoChecklist];
    conditions.extend(
        config
            .ordered_policies()
            .into_iter()
            .map(|policy| Condition::WithChecklist { policy }),
    );
    conditions
}

fn checklist_for<'a>(
    records: &'a [ChecklistRecord],
    instance_id: &str,
    policy: PolicyId,
) -> Option<&'a ChecklistRecord> {
    records
        .iter()
        .find(|r| r.instance_id == instance_id && r.policy == policy)
}

/// Judge every retained instance under no-checklist and every requested
/// with-checklist condition. Complete sets already present in the run
/// record are reused without new model calls.
pub async fn cmd_judge(config: &RunConfig) -> Result<JudgeSummary> {
    config.validate()?;
    let instances = load_dataset(&config.dataset)?;
    let records = load_checklists(config)?;
    let requested = config.ordered_policies();
    let (retained, _) = compute_retention(&instances, &records, &requested);
    std::fs::create_dir_all(&config.out_dir)?;
    echo_config(config)?;

    let judgments_path = config.out_dir.join(JUDGMENTS_FILE);
    let mut existing: BTreeMap<(String, Condition), Vec<ReplicateRecord>> = BTreeMap::new();
    if judgments_path.exists() {
        for record in read_jsonl::<ReplicateRecord>(&judgments_path)? {
            existing
                .entry((record.instance_id.clone(), record.condition))
                .or_default()
                .push(record);
        }
    }

    let client = LlmClient::new(config.judge_endpoint.to_endpoint())?;
    let cassette = config.cassette();
    let engine = JudgeEngine {
        client: &client,
        cassette: &cassette,
        temperature: config.judge_temperature,
    };
    let conditions = conditions_for(config);

    struct Task<'a> {
        order: (usize, usize),
        instance: &'a EvalInstance,
        condition: Condition,
        checklist: Option<Checklist>,
    }
    let mut reused: BTreeMap<(usize, usize), Vec<ReplicateRecord>> = BTreeMap::new();
    let mut tasks = Vec::new();
    let mut sets_reused = 0;
    for (ci, &condition) in conditions.iter().enumerate() {
        for (ii, instance) in retained.iter().enumerate() {
            let key = (instance.id.clone(), condition);
            if let Some(records) = existing.get(&key) {
                if records.len() == REPLICATES {
                    reused.insert((ii, ci), records.clone());
                    sets_reused += 1;
                    continue;
                }
            }
            let checklist = match condition {
                Condition::NoChecklist => None,
                Condition::WithChecklist { policy } => {
                    match checklist_for(&records, &instance.id, policy) {
                        Some(record) => Some(record.to_checklist()),
                        None => {
                            return Err(Error::Validation(format!(
                                "no stored checklist for instance {} under {policy}; run the `gen` command first",
                                instance.id
                            )))
                        }
                    }
                }
            };
            tasks.push(Task { order: (ii, ci), instance, condition, checklist });
        }
    }

    let engine_ref = &engine;
    let sets_judged = tasks.len();
    let results: Vec<((usize, usize), Result<JudgmentSet>)> =
        stream::iter(tasks.into_iter().map(|task| async move {
            let result = engine_ref
                .judge_instance(task.instance, task.condition, task.checklist.as_ref())
                .await;
            (task.order, result)
        }))
        .buffer_unordered(config.judge_endpoint.max_concurrency.max(1))
        .collect()
        .await;

    let mut judged: BTreeMap<(usize, usize), Vec<ReplicateRecord>> = BTreeMap::new();
    let mut incomplete = Vec::new();
    for (order, result) in results {
        match result {
            Ok(set) => {
                judged.insert(
                    order,
                    set.replicates.iter().map(ReplicateRecord::from_replicate).collect(),
                );
            }
            Err(Error::PartialSet { instance_id, condition, failed_indices, completed }) => {
                incomplete.push(IncompleteSet { instance_id, condition, failed_indices });
                judged.insert(
                    order,
                    completed.iter().map(ReplicateRecord::from_replicate).collect(),
                );
            }
            Err(other) => return Err(other),
        }
    }

    // Canonical run-record order: instance file order x condition order.
    let mut all_records = Vec::new();
    for (ii, _instance) in retained.iter().enumerate() {
        for (ci, _condition) in conditions.iter().enumerate() {
            if let Some(records) = reused.get(&(ii, ci)).or_else(|| judged.get(&(ii, ci))) {
                all_records.extend(records.iter().cloned());
            }
        }
    }

    audit_order_balance(&all_records)?;
    write_if_changed(&judgments_path, &jsonl(&all_records)?)?;

    // Resumed incomplete sets stay incomplete in replay mode; recompute the
    // flag list from the final records so it is run-invariant.
    let mut final_incomplete = Vec::new();
    let mut grouped: BTreeMap<(String, Condition), Vec<&ReplicateRecord>> = BTreeMap::new();
    for record in &all_records {
        grouped
            .entry((record.instance_id.clone(), record.condition))
            .or_default()
            .push(record);
    }
    for (ii, instance) in retained.iter().enumerate() {
        for (ci, &condition) in conditions.iter().enumerate() {
            let _ = (ii, ci);
            let present: BTreeSet<u8> = grouped
                .get(&(instance.id.clone(), condition))
                .map(|records| records.iter().map(|r| r.replicate_index).collect())
                .unwrap_or_default();
            if present.len() < REPLICATES {
                final_incomplete.push(IncompleteSet {
                    instance_id: instance.id.clone(),
                    condition,
                    failed_indices: (0..REPLICATES as u8)
                        .filter(|i| !present.contains(i))
                        .collect(),
                });
            }
        }
    }

    let mut template_hashes = BTreeMap::new();
    template_hashes.insert(
        "judge_plain".to_string(),
        judge_template_hash(config.dataset.kind, false),
    );
    template_hashes.insert(
        "judge_checklist".to_string(),
        judge_template_hash(config.dataset.kind, true),
    );
    let report = JudgeReportFile {
        kind: config.dataset.kind,
        instances: retained.iter().map(|i| i.id.clone()).collect(),
        conditions,
        incomplete: final_incomplete.clone(),
        template_hashes,
    };
    let mut report_bytes = serde_json::to_vec_pretty(&report)?;
    report_bytes.push(b'\n');
    write_if_changed(&config.out_dir.join(JUDGE_REPORT_FILE), &report_bytes)?;

    Ok(JudgeSummary {
        instances_judged: retained.len(),
        sets_reused,
        sets_judged,
        incomplete: final_incomplete,
        call_stats: client.stats(),
    })
}

/// Every complete pairwise set must have exactly five replicates per
/// presentation order.
fn audit_order_balance(records: &[ReplicateRecord]) -> Result<()> {
    let mut grouped: BTreeMap<(String, Condition), Vec<&ReplicateRecord>> = BTreeMap::new();
    for record in records {
        grouped
            .entry((record.instance_id.clone(), record.condition))
            .or_default()
            .push(record);
    }
    for ((instance_id, condition), group) in grouped {
        if group.len() != REPLICATES {
            continue; // incomplete sets are flagged, not audited
        }
        if group.iter().all(|r| r.presentation_order.is_some()) {
            let originals = group
                .iter()
                .filter(|r| r.presentation_order == Some(PresentationOrder::Original))
                .count();
            if originals != REPLICATES / 2 {
                return Err(Error::Contract(format!(
                    "order balance violated for {instance_id} under {condition}: {originals} original-order replicates"
                )));
            }
        }
    }
    Ok(())
}

/// Judgment sets rebuilt from the run record, keyed by (instance, condition).
/// Only complete ten-replicate sets are returned.
pub fn load_complete_sets(
    config: &RunConfig,
) -> Result<BTreeMap<(String, Condition), JudgmentSet>> {
    let path = config.out_dir.join(JUDGMENTS_FILE);
    require_artifact(&path, "judge")?;
    let records: Vec<ReplicateRecord> = read_jsonl(&path)?;
    let mut grouped: BTreeMap<(String, Condition), Vec<ReplicateRecord>> = BTreeMap::new();
    for record in records {
        grouped
            .entry((record.instance_id.clone(), record.condition))
            .or_default()
            .push(record);
    }
    let mut sets = BTreeMap::new();
    for ((instance_id, condition), mut group) in grouped {
        if group.len() != REPLICATES {
            continue;
        }
        group.sort_by_key(|r| r.replicate_index);
        let set = JudgmentSet {
            instance_id: instance_id.clone(),
            condition,
            replicates: group.iter().map(|r| r.to_replicate()).collect(),
        };
        set.validate_protocol()?;
        sets.insert((instance_id, condition), set);
    }
    Ok(sets)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub policy: PolicyId,
    pub mode: GateMode,
    pub k: Option<f64>,
    pub n: usize,
    pub metric_kind: String,
    pub metric: f64,
    pub degenerate: Option<bool>,
    pub application_rate: f64,
    pub vs_none: Option<BootstrapOutcome>,
    pub vs_all: Option<BootstrapOutcome>,
}

#[derive(Debug, Serialize)]
pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
    /// Policies skipped because fewer than two instances were eligible.
    pub skipped_policies: Vec<PolicyId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GateDecisionRecord {
    policy: PolicyId,
    mode: GateMode,
    k: Option<f64>,
    instance_id: String,
    inconsistency: f64,
    applied: bool,
}

/// Per-mode evaluation of one policy: metric, per-instance statistics for
/// the bootstrap, and gate decisions.
struct ModeEvaluation {
    metric: f64,
    degenerate: Option<bool>,
    decisions: Vec<GateDecision>,
    per_instance: Vec<f64>,
    pairs: Vec<(u8, u8)>,
}

fn evaluate_mode(
    policy_sets: &[(&EvalInstance, &JudgmentSet, &JudgmentSet)],
    gate_policy: GatePolicy,
    config: &RunConfig,
) -> Result<ModeEvaluation> {
    let mut decisions = Vec::new();
    let mut per_instance = Vec::new();
    let mut pairs = Vec::new();
    let mut outcomes = Vec::new();
    let mut golds = Vec::new();
    for (instance, no_set, with_set) in policy_sets {
        let (decision, effective) = gate(gate_policy, no_set, with_set)?;
        decisions.push(decision);
        match config.dataset.kind {
            TaskKind::Pairwise => {
                let outcome = aggregate_pairwise(effective)?;
                per_instance.push(instance_accuracy_score(&outcome, &instance.gold)?);
                outcomes.push(outcome);
                golds.push(instance.gold.clone());
            }
            TaskKind::Direct => {
                let outcome = aggregate_direct(effective)?;
                let system = match outcome.outcome {
                    crate::metrics::Outcome::Direct { score } => score,
                    _ => unreachable!("aggregate_direct returns direct outcomes"),
                };
                let gold = match &instance.gold {
                    GoldLabel::Direct { gold, .. } => *gold,
                    _ => {
                        return Err(Error::Contract(format!(
                            "direct sweep needs direct gold for {}",
                            instance.id
                        )))
                    }
                };
                per_instance.push(-((system as f64) - (gold as f64)).abs());
                pairs.push((system, gold));
            }
        }
    }
    let (metric, degenerate) = match config.dataset.kind {
        TaskKind::Pairwise => (accuracy(&outcomes, &golds)?, None),
        TaskKind::Direct => {
            let alpha = krippendorff_alpha(&pairs, config.alpha_level)?;
            (alpha.value, Some(alpha.degenerate))
        }
    };
    Ok(ModeEvaluation { metric, degenerate, decisions, per_instance, pairs })
}

fn bootstrap_between(
    selective: &ModeEvaluation,
    baseline: &ModeEvaluation,
    config: &RunConfig,
) -> Result<BootstrapOutcome> {
    match (config.dataset.kind, config.direct_bootstrap) {
        (TaskKind::Direct, DirectBootstrapMode::Alpha) => {
            let sel = selective.pairs.clone();
            let base = baseline.pairs.clone();
            let level = config.alpha_level;
            bootstrap_paired(sel.len(), &config.bootstrap(), move |indices| {
                let sample_sel: Vec<(u8, u8)> = indices.iter().map(|&i| sel[i]).collect();
                let sample_base: Vec<(u8, u8)> = indices.iter().map(|&i| base[i]).collect();
                let a = krippendorff_alpha(&sample_sel, level).map(|a| a.value).unwrap_or(1.0);
                let b = krippendorff_alpha(&sample_base, level).map(|a| a.value).unwrap_or(1.0);
                a - b
            })
        }
        _ => bootstrap_diff(&selective.per_instance, &baseline.per_instance, &config.bootstrap()),
    }
}

/// Sweep gate modes over the grid: aggregate, score against gold, and
/// bootstrap selective against both the none and all baselines.
pub fn cmd_sweep(config: &RunConfig) -> Result<SweepOutput> {
    config.validate()?;
    let instances = load_dataset(&config.dataset)?;
    let records = load_checklists(config)?;
    let requested = config.ordered_policies();
    let (retained, _) = compute_retention(&instances, &records, &requested);
    let sets = load_complete_sets(config)?;
    std::fs::create_dir_all(&config.out_dir)?;
    echo_config(config)?;

    let mut rows = Vec::new();
    let mut skipped_policies = Vec::new();
    let mut decision_records = Vec::new();

    for &policy in &requested {
        let condition = Condition::WithChecklist { policy };
        let policy_sets: Vec<(&EvalInstance, &JudgmentSet, &JudgmentSet)> = retained
            .iter()
            .filter_map(|instance| {
                let no = sets.get(&(instance.id.clone(), Condition::NoChecklist))?;
                let with = sets.get(&(instance.id.clone(), condition))?;
                Some((instance, no, with))
            })
            .collect();
        if policy_sets.len() < 2 {
            skipped_policies.push(policy);
            continue;
        }

        let mut gate_policies = vec![
            (GateMode::None, GatePolicy::none()),
            (GateMode::All, GatePolicy::all()),
        ];
        for k in config.grid() {
            gate_policies.push((GateMode::Selective, GatePolicy::selective(k)));
        }

        let none_eval = evaluate_mode(&policy_sets, GatePolicy::none(), config)?;
        let all_eval = evaluate_mode(&policy_sets, GatePolicy::all(), config)?;

        for (mode, gate_policy) in gate_policies {
            let eval = evaluate_mode(&policy_sets, gate_policy, config)?;
            let (vs_none, vs_all) = if mode == GateMode::Selective {
                (
                    Some(bootstrap_between(&eval, &none_eval, config)?),
                    Some(bootstrap_between(&eval, &all_eval, config)?),
                )
            } else {
                (None, None)
            };
            for decision in &eval.decisions {
                decision_records.push(GateDecisionRecord {
                    policy,
                    mode,
                    k: gate_policy.k,
                    instance_id: decision.instance_id.clone(),
                    inconsistency: decision.inconsistency,
                    applied: decision.applied,
                });
            }
            rows.push(SweepRow {
                policy,
                mode,
                k: gate_policy.k,
                n: policy_sets.len(),
                metric_kind: metric_kind(config),
                metric: eval.metric,
                degenerate: eval.degenerate,
                application_rate: application_rate(&eval.decisions)?,
                vs_none,
                vs_all,
            });
        }
    }

    write_if_changed(&config.out_dir.join(SWEEP_FILE), render_sweep_tsv(&rows).as_bytes())?;
    write_if_changed(
        &config.out_dir.join(GATE_DECISIONS_FILE),
        &jsonl(&decision_records)?,
    )?;

    Ok(SweepOutput { rows, skipped_policies })
}

fn metric_kind(config: &RunConfig) -> String {
    match config.dataset.kind {
        TaskKind::Pairwise => "accuracy".to_string(),
        TaskKind::Direct => format!("alpha_{}", config.alpha_level),
    }
}

fn fmt_opt_f64(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v:.4}"),
        None => "-".to_string(),
    }
}

fn fmt_k(k: Option<f64>) -> String {
    match k {
        Some(k) => format!("{k}"),
        None => "-".to_string(),
    }
}

fn render_sweep_tsv(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "policy\tmode\tk\tn\tmetric_kind\tmetric\tdegenerate\tapplication_rate\t\
         vs_none_ci_low\tvs_none_ci_high\tvs_none_significant\t\
         vs_all_ci_low\tvs_all_ci_high\tvs_all_significant\n",
    );
    for row in rows {
        let degenerate = match row.degenerate {
            Some(d) => d.to_string(),
            None => "-".to_string(),
        };
        let (none_lo, none_hi, none_sig) = bootstrap_cols(&row.vs_none);
        let (all_lo, all_hi, all_sig) = bootstrap_cols(&row.vs_all);
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{:.4}\t{}\t{:.4}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            row.policy,
            row.mode,
            fmt_k(row.k),
            row.n,
            row.metric_kind,
            row.metric,
            degenerate,
            row.application_rate,
            none_lo,
            none_hi,
            none_sig,
            all_lo,
            all_hi,
            all_sig,
        ));
    }
    out
}

fn bootstrap_cols(outcome: &Option<BootstrapOutcome>) -> (String, String, String) {
    match outcome {
        Some(o) => (
            fmt_opt_f64(Some(o.ci_low)),
            fmt_opt_f64(Some(o.ci_high)),
            o.significant.to_string(),
        ),
        None => ("-".into(), "-".into(), "-".into()),
    }
}

#[derive(Debug, Serialize)]
pub struct AblateSummary {
    pub checklists_classified: usize,
    pub checklists_ablated: usize,
    pub unresolved_items: usize,
    pub report: AblationReport,
    pub call_stats: CallStats,
}

/// Two-step ablation: classify whole checklists from existing judgments,
/// then leave-one-out re-judge items of the positive and negative ones.
pub async fn cmd_ablate(config: &RunConfig) -> Result<AblateSummary> {
    config.validate()?;
    let instances = load_dataset(&config.dataset)?;
    let records = load_checklists(config)?;
    let requested = config.ordered_policies();
    let (retained, _) = compute_retention(&instances, &records, &requested);
    let sets = load_complete_sets(config)?;
    std::fs::create_dir_all(&config.out_dir)?;
    echo_config(config)?;

    let client = LlmClient::new(config.ablation_endpoint_config().to_endpoint())?;
    let cassette = config.cassette();
    let engine = JudgeEngine {
        client: &client,
        cassette: &cassette,
        temperature: config.judge_temperature,
    };

    // Scores in (policy order, instance order), matching the sweep grouping.
    let mut scores = Vec::new();
    let mut lookup: BTreeMap<(String, PolicyId), (&EvalInstance, Checklist, f64, f64)> =
        BTreeMap::new();
    for &policy in &requested {
        let condition = Condition::WithChecklist { policy };
        for instance in &retained {
            let no = match sets.get(&(instance.id.clone(), Condition::NoChecklist)) {
                Some(set) => set,
                None => continue,
            };
            let with = match sets.get(&(instance.id.clone(), condition)) {
                Some(set) => set,
                None => continue,
            };
            let checklist = match checklist_for(&records, &instance.id, policy) {
                Some(record) => record.to_checklist(),
                None => continue,
            };
            let gold_mean = instance.gold.gold_mean();
            let none_mean = mean_score(no)?;
            let all_mean = mean_score(with)?;
            scores.push(ChecklistScore {
                instance_id: instance.id.clone(),
                policy,
                gold_mean,
                none_mean,
                all_mean,
            });
            lookup.insert(
                (instance.id.clone(), policy),
                (instance, checklist, gold_mean, all_mean),
            );
        }
    }

    let classes = classify_checklists(&scores, config.dataset.kind, config.checklist_threshold);

    let mut ablations: Vec<ItemAblation> = Vec::new();
    for class in &classes {
        if class.label == ClassLabel::Neutral {
            continue; // skip rule: no leave-one-out calls for neutral checklists
        }
        let (instance, checklist, gold_mean, all_mean) = lookup
            .get(&(class.instance_id.clone(), class.policy))
            .expect("classified checklist has lookup entry");
        let ablation =
            ablate_items(instance, checklist, class, &engine, *gold_mean, *all_mean).await?;
        ablations.push(ablation);
    }

    let report = ablation_report(&classes, &ablations);
    write_ablation_artifacts(config, &scores, &classes, &ablations, &report)?;

    Ok(AblateSummary {
        checklists_classified: classes.len(),
        checklists_ablated: ablations.len(),
        unresolved_items: report.unresolved_items,
        report,
        call_stats: client.stats(),
    })
}

fn write_ablation_artifacts(
    config: &RunConfig,
    scores: &[ChecklistScore],
    classes: &[ChecklistClass],
    ablations: &[ItemAblation],
    report: &AblationReport,
) -> Result<()> {
    let mut checklist_tsv =
        String::from("instance_id\tpolicy\tgold_mean\tnone_mean\tall_mean\tdelta_all\tlabel\n");
    for (score, class) in scores.iter().zip(classes) {
        checklist_tsv.push_str(&format!(
            "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}\n",
            score.instance_id,
            score.policy,
            score.gold_mean,
            score.none_mean,
            score.all_mean,
            delta_all(score.gold_mean, score.none_mean, score.all_mean),
            class.label,
        ));
    }
    write_if_changed(
        &config.out_dir.join(ABLATION_CHECKLISTS_FILE),
        checklist_tsv.as_bytes(),
    )?;

    let mut items_tsv =
        String::from("instance_id\tpolicy\tchecklist_label\titem_index\tdelta_abl\tlabel\n");
    for ablation in ablations {
        for item in &ablation.classes {
            items_tsv.push_str(&format!(
                "{}\t{}\t{}\t{}\t{:.4}\t{}\n",
                ablation.instance_id,
                ablation.policy,
                ablation.checklist_label,
                item.item_index,
                item.delta_abl,
                item.label,
            ));
        }
        for &index in &ablation.unresolved {
            items_tsv.push_str(&format!(
                "{}\t{}\t{}\t{}\t-\tunresolved\n",
                ablation.instance_id, ablation.policy, ablation.checklist_label, index,
            ));
        }
    }
    write_if_changed(&config.out_dir.join(ABLATION_ITEMS_FILE), items_tsv.as_bytes())?;

    let mut summary_bytes = serde_json::to_vec_pretty(report)?;
    summary_bytes.push(b'\n');
    write_if_changed(&config.out_dir.join(ABLATION_SUMMARY_FILE), &summary_bytes)?;
    Ok(())
}
