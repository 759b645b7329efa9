//! The judgment protocol: ten replicates per (instance, condition),
//! alternating presentation order for pairwise tasks, reason-then-answer
//! prompts without checklists, and item-verdicts-then-final-verdict with
//! checklists.

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};

use crate::checklist::{find_marker, templates, Checklist};
use crate::client::{cassette_key, sha256_hex, Cassette, ChatMessage, ChatRequest, LlmClient};
use crate::error::{Error, Result};
use crate::model::{
    Choice, Condition, DirectVerdict, EvalInstance, ItemVerdict, PairwiseVerdict, TaskKind,
};

pub const REPLICATES: usize = 10;
pub const MAX_REPLICATE_ATTEMPTS: u32 = 3;

/// Which candidate the judge saw as "Response 1".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresentationOrder {
    /// Output 1 shown first.
    Original,
    /// Output 2 shown first.
    Swapped,
}

impl PresentationOrder {
    /// Order for replicate `i`: alternating, five of each across ten.
    pub fn for_replicate(index: usize) -> Self {
        if index % 2 == 0 {
            PresentationOrder::Original
        } else {
            PresentationOrder::Swapped
        }
    }

    /// Map a marker label the judge emitted back to the original output.
    pub fn unflip(self, seen: Choice) -> Choice {
        match self {
            PresentationOrder::Original => seen,
            PresentationOrder::Swapped => seen.other(),
        }
    }
}

/// Final verdict of one replicate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Verdict {
    Pairwise(PairwiseVerdict),
    Direct(DirectVerdict),
}

impl Verdict {
    pub fn kind(&self) -> TaskKind {
        match self {
            Verdict::Pairwise(_) => TaskKind::Pairwise,
            Verdict::Direct(_) => TaskKind::Direct,
        }
    }

    /// Numeric encoding used for mean scores: the choice label (1 or 2)
    /// for pairwise, the score for direct.
    pub fn as_score(&self) -> f64 {
        match self {
            Verdict::Pairwise(v) => v.choice.label() as f64,
            Verdict::Direct(v) => v.score as f64,
        }
    }
}

/// One model verdict for one replicate of one (instance, condition).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgmentReplicate {
    pub instance_id: String,
    pub condition: Condition,
    pub replicate_index: u8,
    pub presentation_order: Option<PresentationOrder>,
    pub item_verdicts: Option<Vec<ItemVerdict>>,
    pub final_verdict: Verdict,
    /// Full model text. Not persisted in the run record (only its hash is).
    pub raw: String,
}

/// The ten-replicate bundle for one (instance, condition).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgmentSet {
    pub instance_id: String,
    pub condition: Condition,
    pub replicates: Vec<JudgmentReplicate>,
}

impl JudgmentSet {
    pub fn kind(&self) -> Result<TaskKind> {
        match self.replicates.first() {
            Some(r) => Ok(r.final_verdict.kind()),
            None => Err(Error::Contract("empty judgment set".into())),
        }
    }

    /// Protocol-level invariants: exactly ten replicates, and for pairwise
    /// sets exactly five per presentation order.
    pub fn validate_protocol(&self) -> Result<()> {
        if self.replicates.len() != REPLICATES {
            return Err(Error::Contract(format!(
                "judgment set for {} has {} replicates, expected {REPLICATES}",
                self.instance_id,
                self.replicates.len()
            )));
        }
        if self.kind()? == TaskKind::Pairwise {
            let original = self
                .replicates
                .iter()
                .filter(|r| r.presentation_order == Some(PresentationOrder::Original))
                .count();
            if original != REPLICATES / 2 {
                return Err(Error::Contract(format!(
                    "pairwise judgment set for {} has {original} original-order replicates, expected {}",
                    self.instance_id,
                    REPLICATES / 2
                )));
            }
        }
        Ok(())
    }

    pub fn scores(&self) -> Vec<f64> {
        self.replicates.iter().map(|r| r.final_verdict.as_score()).collect()
    }

    /// Pairwise vote counts (for output 1, for output 2) in original identity.
    pub fn vote_counts(&self) -> Result<(u32, u32)> {
        let mut one = 0;
        let mut two = 0;
        for r in &self.replicates {
            match r.final_verdict {
                Verdict::Pairwise(v) => match v.choice {
                    Choice::One => one += 1,
                    Choice::Two => two += 1,
                },
                Verdict::Direct(_) => {
                    return Err(Error::Contract(format!(
                        "direct verdict in pairwise judgment set for {}",
                        self.instance_id
                    )))
                }
            }
        }
        Ok((one, two))
    }
}

/// Prompt for one replicate. For pairwise tasks the two outputs are shown
/// in `order`; verdicts are mapped back to original identity at parse time.
pub fn build_judge_prompt(
    instance: &EvalInstance,
    checklist: Option<&Checklist>,
    order: PresentationOrder,
) -> Vec<ChatMessage> {
    let text = match (instance.kind, checklist) {
        (TaskKind::Pairwise, None) => {
            let (first, second) = ordered_outputs(instance, order);
            templates::JUDGE_PAIRWISE_PLAIN
                .replace("{input}", &instance.input_text)
                .replace("{response_1}", first)
                .replace("{response_2}", second)
        }
        (TaskKind::Pairwise, Some(checklist)) => {
            let (first, second) = ordered_outputs(instance, order);
            templates::JUDGE_PAIRWISE_CHECKLIST
                .replace("{input}", &instance.input_text)
                .replace("{response_1}", first)
                .replace("{response_2}", second)
                .replace("{items}", &checklist.render_items())
        }
        (TaskKind::Direct, None) => templates::JUDGE_DIRECT_PLAIN
            .replace("{input}", &instance.input_text)
            .replace("{response}", &instance.outputs[0]),
        (TaskKind::Direct, Some(checklist)) => templates::JUDGE_DIRECT_CHECKLIST
            .replace("{input}", &instance.input_text)
            .replace("{response}", &instance.outputs[0])
            .replace("{items}", &checklist.render_items()),
    };
    vec![ChatMessage::user(text)]
}

fn ordered_outputs(instance: &EvalInstance, order: PresentationOrder) -> (&str, &str) {
    match order {
        PresentationOrder::Original => (&instance.outputs[0], &instance.outputs[1]),
        PresentationOrder::Swapped => (&instance.outputs[1], &instance.outputs[0]),
    }
}

/// Hash pinning the judge template for a (kind, condition) pair.
pub fn judge_template_hash(kind: TaskKind, with_checklist: bool) -> String {
    let text = match (kind, with_checklist) {
        (TaskKind::Pairwise, false) => templates::JUDGE_PAIRWISE_PLAIN,
        (TaskKind::Pairwise, true) => templates::JUDGE_PAIRWISE_CHECKLIST,
        (TaskKind::Direct, false) => templates::JUDGE_DIRECT_PLAIN,
        (TaskKind::Direct, true) => templates::JUDGE_DIRECT_CHECKLIST,
    };
    sha256_hex(text)
}

/// Extract the canonical final-verdict marker ("Winner: 1|2" or
/// "Score: 1-5"). Pairwise choices are normalized back to original output
/// identity using the presentation order.
pub fn parse_final_verdict(raw: &str, kind: TaskKind, order: PresentationOrder) -> Result<Verdict> {
    match kind {
        TaskKind::Pairwise => {
            let value = marker_value(raw, "winner:")?;
            let seen = Choice::from_label(value)
                .map_err(|_| Error::parse(format!("winner label out of range: {value}"), raw))?;
            Ok(Verdict::Pairwise(PairwiseVerdict { choice: order.unflip(seen) }))
        }
        TaskKind::Direct => {
            let value = marker_value(raw, "score:")?;
            let verdict = DirectVerdict::new(value)
                .map_err(|_| Error::parse(format!("score out of range: {value}"), raw))?;
            Ok(Verdict::Direct(verdict))
        }
    }
}

fn marker_value(raw: &str, marker: &str) -> Result<u8> {
    let pos = find_marker(raw, marker)
        .ok_or_else(|| Error::parse(format!("no {marker:?} marker"), raw))?;
    let after = &raw[pos + marker.len()..];
    let digits: String = after
        .chars()
        .skip_while(|c| c.is_whitespace() || *c == '*')
        .take_while(|c| c.is_ascii_digit())
        .collect();
    digits
        .parse()
        .map_err(|_| Error::parse(format!("no value after {marker:?}"), raw))
}

/// Parse the enumerated answer block into exactly `n_items` verdicts,
/// case-insensitively matching yes / no / n-a tokens.
pub fn parse_item_verdicts(raw: &str, n_items: usize) -> Result<Vec<ItemVerdict>> {
    if n_items == 0 {
        return Err(Error::Contract("n_items must be >= 1".into()));
    }
    let mut verdicts: Vec<Option<ItemVerdict>> = vec![None; n_items];
    for line in raw.lines() {
        let trimmed = line.trim().trim_start_matches('*').trim();
        let lowered = trimmed.to_ascii_lowercase();
        let rest = lowered.strip_prefix("item ").unwrap_or(&lowered);
        let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
        if digits.is_empty() {
            continue;
        }
        let after = &rest[digits.len()..];
        let after = match after
            .trim_start()
            .strip_prefix(':')
            .or_else(|| after.trim_start().strip_prefix('.'))
            .or_else(|| after.trim_start().strip_prefix(')'))
        {
            Some(a) => a,
            None => continue,
        };
        let index: usize = match digits.parse::<usize>() {
            Ok(i) if i >= 1 => i - 1,
            _ => continue,
        };
        let token = after.trim().trim_matches('*').trim();
        let verdict = match token {
            "yes" => ItemVerdict::Yes,
            "no" => ItemVerdict::No,
            "n/a" | "na" | "n.a." | "not applicable" => ItemVerdict::NotApplicable,
            other => {
                return Err(Error::parse(
                    format!("unknown item verdict token {other:?}"),
                    raw,
                ))
            }
        };
        if index >= n_items {
            return Err(Error::parse(
                format!("item index {} out of range (checklist has {n_items})", index + 1),
                raw,
            ));
        }
        if verdicts[index].is_some() {
            return Err(Error::parse(format!("duplicate verdict for item {}", index + 1), raw));
        }
        verdicts[index] = Some(verdict);
    }
    let mut out = Vec::with_capacity(n_items);
    for (i, v) in verdicts.into_iter().enumerate() {
        match v {
            Some(v) => out.push(v),
            None => {
                return Err(Error::parse(
                    format!("missing verdict for item {} of {n_items}", i + 1),
                    raw,
                ))
            }
        }
    }
    Ok(out)
}

/// Judge bound to one endpoint and cassette.
pub struct JudgeEngine<'a> {
    pub client: &'a LlmClient,
    pub cassette: &'a Cassette,
    pub temperature: f64,
}

impl<'a> JudgeEngine<'a> {
    /// Run the full ten-replicate protocol for one (instance, condition).
    /// Per-replicate parse failures are retried with fresh samples up to
    /// three attempts; if any replicate exhausts its retries the whole set
    /// is reported as a partial-set error carrying the completed replicates.
    pub async fn judge_instance(
        &self,
        instance: &EvalInstance,
        condition: Condition,
        checklist: Option<&Checklist>,
    ) -> Result<JudgmentSet> {
        match condition {
            Condition::WithChecklist { .. } if checklist.is_none() => {
                return Err(Error::Contract(format!(
                    "with_checklist condition for {} requires a checklist",
                    instance.id
                )))
            }
            Condition::NoChecklist if checklist.is_some() => {
                return Err(Error::Contract(format!(
                    "no_checklist condition for {} must not carry a checklist",
                    instance.id
                )))
            }
            _ => {}
        }

        let results: Vec<(usize, Result<JudgmentReplicate>)> =
            stream::iter((0..REPLICATES).map(|i| async move {
                (i, self.run_replicate(instance, condition, checklist, i).await)
            }))
            .buffer_unordered(REPLICATES)
            .collect()
            .await;

        let mut completed = Vec::new();
        let mut failed_indices = Vec::new();
        let mut ordered: Vec<_> = results.into_iter().collect();
        ordered.sort_by_key(|(i, _)| *i);
        for (i, result) in ordered {
            match result {
                Ok(replicate) => completed.push(replicate),
                Err(Error::Parse { .. }) => failed_indices.push(i as u8),
                Err(other) => return Err(other),
            }
        }

        if failed_indices.is_empty() {
            let set = JudgmentSet {
                instance_id: instance.id.clone(),
                condition,
                replicates: completed,
            };
            set.validate_protocol()?;
            Ok(set)
        } else {
            Err(Error::PartialSet {
                instance_id: instance.id.clone(),
                condition,
                failed_indices,
                completed,
            })
        }
    }

    async fn run_replicate(
        &self,
        instance: &EvalInstance,
        condition: Condition,
        checklist: Option<&Checklist>,
        index: usize,
    ) -> Result<JudgmentReplicate> {
        let order = PresentationOrder::for_replicate(index);
        let messages = build_judge_prompt(instance, checklist, order);
        let mut last_parse_error = None;
        for attempt in 0..MAX_REPLICATE_ATTEMPTS {
            let request = ChatRequest {
                messages: messages.clone(),
                temperature: self.temperature,
                replicate_index: replicate_request_index(index, attempt),
            };
            let raw = self.client.complete(&request, self.cassette).await?;
            match parse_replicate(&raw, instance, condition, checklist, index, order) {
                Ok(replicate) => return Ok(replicate),
                Err(e @ Error::Parse { .. }) => last_parse_error = Some(e),
                Err(other) => return Err(other),
            }
        }
        Err(last_parse_error.expect("at least one attempt ran"))
    }

    /// Cassette key for one replicate attempt, for fixture authoring.
    pub fn key_for(
        &self,
        instance: &EvalInstance,
        checklist: Option<&Checklist>,
        index: usize,
        attempt: u32,
    ) -> String {
        let order = PresentationOrder::for_replicate(index);
        let request = ChatRequest {
            messages: build_judge_prompt(instance, checklist, order),
            temperature: self.temperature,
            replicate_index: replicate_request_index(index, attempt),
        };
        cassette_key(self.client.model_name(), &request)
    }
}

/// Request-level replicate index: retries get fresh samples by shifting
/// into a disjoint range (attempt 1 of replicate 3 -> 13, etc).
pub fn replicate_request_index(replicate: usize, attempt: u32) -> u32 {
    replicate as u32 + REPLICATES as u32 * attempt
}

fn parse_replicate(
    raw: &str,
    instance: &EvalInstance,
    condition: Condition,
    checklist: Option<&Checklist>,
    index: usize,
    order: PresentationOrder,
) -> Result<JudgmentReplicate> {
    let item_verdicts = match checklist {
        Some(checklist) => Some(parse_item_verdicts(raw, checklist.items.len())?),
        None => None,
    };
    let final_verdict = parse_final_verdict(raw, instance.kind, order)?;
    Ok(JudgmentReplicate {
        instance_id: instance.id.clone(),
        condition,
        replicate_index: index as u8,
        presentation_order: (instance.kind == TaskKind::Pairwise).then_some(order),
        item_verdicts,
        final_verdict,
        raw: raw.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_alternation_balances_five_and_five() {
        let originals = (0..REPLICATES)
            .filter(|&i| PresentationOrder::for_replicate(i) == PresentationOrder::Original)
            .count();
        assert_eq!(originals, 5);
    }

    #[test]
    fn winner_under_swapped_order_unflips() {
        // judge saw output 2 as "Response 1"; "Winner: 2" means original output 1
        let v = parse_final_verdict(
            "reasoning...\nWinner: 2",
            TaskKind::Pairwise,
            PresentationOrder::Swapped,
        )
        .unwrap();
        assert_eq!(v, Verdict::Pairwise(PairwiseVerdict { choice: Choice::One }));
    }

    #[test]
    fn winner_under_original_order_passes_through() {
        let v = parse_final_verdict("Winner: 2", TaskKind::Pairwise, PresentationOrder::Original)
            .unwrap();
        assert_eq!(v, Verdict::Pairwise(PairwiseVerdict { choice: Choice::Two }));
    }

    #[test]
    fn score_marker_parses() {
        let v = parse_final_verdict("Score: 5", TaskKind::Direct, PresentationOrder::Original)
            .unwrap();
        assert_eq!(v, Verdict::Direct(DirectVerdict { score: 5 }));
    }

    #[test]
    fn score_out_of_range_is_a_parse_error() {
        assert!(matches!(
            parse_final_verdict("Score: 7", TaskKind::Direct, PresentationOrder::Original),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn missing_marker_is_a_parse_error() {
        assert!(parse_final_verdict("no verdict here", TaskKind::Direct, PresentationOrder::Original).is_err());
    }

    #[test]
    fn last_marker_wins() {
        let raw = "Maybe Winner: 1 at first glance...\nFinal answer.\nWinner: 2";
        let v = parse_final_verdict(raw, TaskKind::Pairwise, PresentationOrder::Original).unwrap();
        assert_eq!(v, Verdict::Pairwise(PairwiseVerdict { choice: Choice::Two }));
    }

    #[test]
    fn item_verdicts_parse_in_order() {
        let v = parse_item_verdicts("1: yes\n2: n/a\n3: no", 3).unwrap();
        assert_eq!(v, vec![ItemVerdict::Yes, ItemVerdict::NotApplicable, ItemVerdict::No]);
    }

    #[test]
    fn item_verdicts_fold_case() {
        assert_eq!(parse_item_verdicts("1: YES", 1).unwrap(), vec![ItemVerdict::Yes]);
    }

    #[test]
    fn unknown_token_is_a_parse_error() {
        assert!(parse_item_verdicts("1: maybe", 1).is_err());
    }

    #[test]
    fn count_mismatch_is_a_parse_error() {
        assert!(parse_item_verdicts("1: yes\n2: no", 3).is_err());
        assert!(parse_item_verdicts("1: yes\n2: no\n3: yes\n4: no", 3).is_err());
    }

    #[test]
    fn replicate_request_indices_are_disjoint_across_attempts() {
        let mut seen = std::collections::BTreeSet::new();
        for attempt in 0..MAX_REPLICATE_ATTEMPTS {
            for replicate in 0..REPLICATES {
                assert!(seen.insert(replicate_request_index(replicate, attempt)));
            }
        }
    }
}
