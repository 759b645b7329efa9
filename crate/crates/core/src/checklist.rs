//! Checklist generation under the six policies, with parse validation and
//! bounded regeneration (three attempts per checklist).

use serde::{Deserialize, Serialize};

use crate::client::{cassette_key, sha256_hex, Cassette, ChatMessage, ChatRequest, LlmClient};
use crate::error::{Error, Result};
use crate::model::{round_half_away_from_zero, EvalInstance, PolicyId};

/// One yes/no-answerable criterion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChecklistItem {
    pub text: String,
    pub index: usize,
}

/// A generated checklist with its policy provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checklist {
    pub instance_id: String,
    pub policy: PolicyId,
    pub items: Vec<ChecklistItem>,
    /// 1-based attempt on which generation succeeded. Always <= 3.
    pub generation_attempt: u32,
    /// Critique feedback that drove regeneration (self_refine only).
    pub refine_feedback: Option<String>,
}

impl Checklist {
    pub fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::Validation(format!(
                "checklist for {} has no items",
                self.instance_id
            )));
        }
        if self.policy == PolicyId::Ticking && !(2..=8).contains(&self.items.len()) {
            return Err(Error::Validation(format!(
                "ticking checklist for {} has {} items, must be 2-8",
                self.instance_id,
                self.items.len()
            )));
        }
        if self.generation_attempt == 0 || self.generation_attempt > MAX_GENERATION_ATTEMPTS {
            return Err(Error::Validation(format!(
                "generation_attempt {} out of bounds",
                self.generation_attempt
            )));
        }
        Ok(())
    }

    /// Copy of this checklist with item `index` removed and the remaining
    /// items reindexed, for leave-one-out ablation.
    pub fn without_item(&self, index: usize) -> Checklist {
        let items = self
            .items
            .iter()
            .filter(|item| item.index != index)
            .enumerate()
            .map(|(i, item)| ChecklistItem { text: item.text.clone(), index: i })
            .collect();
        Checklist { items, ..self.clone() }
    }

    /// Items rendered as the numbered block used in prompts.
    pub fn render_items(&self) -> String {
        render_item_texts(self.items.iter().map(|i| i.text.as_str()))
    }
}

fn render_item_texts<'a>(texts: impl Iterator<Item = &'a str>) -> String {
    texts
        .enumerate()
        .map(|(i, text)| format!("{}. {}", i + 1, text))
        .collect::<Vec<_>>()
        .join("\n")
}

pub const MAX_GENERATION_ATTEMPTS: u32 = 3;

/// Length scaling factors for the two scaled policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleFactor {
    Half,
    OneAndHalf,
}

impl ScaleFactor {
    pub fn policy(self) -> PolicyId {
        match self {
            ScaleFactor::Half => PolicyId::LengthHalf,
            ScaleFactor::OneAndHalf => PolicyId::LengthX1_5,
        }
    }

    pub fn value(self) -> f64 {
        match self {
            ScaleFactor::Half => 0.5,
            ScaleFactor::OneAndHalf => 1.5,
        }
    }

    pub fn for_policy(policy: PolicyId) -> Option<Self> {
        match policy {
            PolicyId::LengthHalf => Some(ScaleFactor::Half),
            PolicyId::LengthX1_5 => Some(ScaleFactor::OneAndHalf),
            _ => None,
        }
    }
}

/// Target item count for a scaled checklist: round half away from zero,
/// floored at one item.
pub fn scaled_target_count(baseline_len: usize, factor: ScaleFactor) -> usize {
    let target = round_half_away_from_zero(factor.value() * baseline_len as f64) as usize;
    target.max(1)
}

pub mod templates {
    //! Prompt templates, pinned by content hash in every run record.

    pub const GEN_BASELINE: &str = include_str!("../templates/gen_baseline.txt");
    pub const GEN_SPECIFY: &str = include_str!("../templates/gen_specify.txt");
    pub const GEN_LENGTH: &str = include_str!("../templates/gen_length.txt");
    pub const GEN_REFINE_CRITIQUE: &str = include_str!("../templates/gen_refine_critique.txt");
    pub const GEN_REFINE_REGEN: &str = include_str!("../templates/gen_refine_regen.txt");
    pub const GEN_TICKING: &str = include_str!("../templates/gen_ticking.txt");
    pub const JUDGE_PAIRWISE_PLAIN: &str = include_str!("../templates/judge_pairwise_plain.txt");
    pub const JUDGE_PAIRWISE_CHECKLIST: &str =
        include_str!("../templates/judge_pairwise_checklist.txt");
    pub const JUDGE_DIRECT_PLAIN: &str = include_str!("../templates/judge_direct_plain.txt");
    pub const JUDGE_DIRECT_CHECKLIST: &str =
        include_str!("../templates/judge_direct_checklist.txt");
}

/// Hash pinning the template used for one generation policy.
pub fn template_hash(policy: PolicyId) -> String {
    let text = match policy {
        PolicyId::Baseline => templates::GEN_BASELINE.to_string(),
        PolicyId::Specify => templates::GEN_SPECIFY.to_string(),
        PolicyId::LengthHalf | PolicyId::LengthX1_5 => templates::GEN_LENGTH.to_string(),
        PolicyId::SelfRefine => format!(
            "{}\n---\n{}",
            templates::GEN_REFINE_CRITIQUE,
            templates::GEN_REFINE_REGEN
        ),
        PolicyId::Ticking => templates::GEN_TICKING.to_string(),
    };
    sha256_hex(&text)
}

/// Prompt for a single-call generation policy (baseline, specify, ticking).
pub fn build_generation_prompt(instance: &EvalInstance, policy: PolicyId) -> Vec<ChatMessage> {
    let template = match policy {
        PolicyId::Baseline => templates::GEN_BASELINE,
        PolicyId::Specify => templates::GEN_SPECIFY,
        PolicyId::Ticking => templates::GEN_TICKING,
        other => panic!("build_generation_prompt does not handle {other}"),
    };
    vec![ChatMessage::user(
        template.replace("{input}", &instance.input_text),
    )]
}

/// Prompt instructing the model to produce exactly `target_count` items.
pub fn build_length_prompt(
    instance: &EvalInstance,
    baseline: &Checklist,
    target_count: usize,
) -> Vec<ChatMessage> {
    let text = templates::GEN_LENGTH
        .replace("{input}", &instance.input_text)
        .replace("{baseline_items}", &baseline.render_items())
        .replace("{target_count}", &target_count.to_string());
    vec![ChatMessage::user(text)]
}

/// Critique prompt for the self-refine policy.
pub fn build_critique_prompt(instance: &EvalInstance, baseline: &Checklist) -> Vec<ChatMessage> {
    let text = templates::GEN_REFINE_CRITIQUE
        .replace("{input}", &instance.input_text)
        .replace("{baseline_items}", &baseline.render_items());
    vec![ChatMessage::user(text)]
}

/// Regeneration prompt conditioned on critique feedback.
pub fn build_refine_prompt(
    instance: &EvalInstance,
    baseline: &Checklist,
    feedback: &str,
) -> Vec<ChatMessage> {
    let text = templates::GEN_REFINE_REGEN
        .replace("{input}", &instance.input_text)
        .replace("{baseline_items}", &baseline.render_items())
        .replace("{feedback}", feedback);
    vec![ChatMessage::user(text)]
}

/// Extract enumerated question lines from a raw model output. Accepts
/// `1.` / `1)` / `1:` numbering and `-` / `*` bullets; strips the marker
/// and surrounding emphasis; every extracted line must end with `?`.
pub fn parse_checklist(raw: &str, policy: PolicyId) -> Result<Vec<ChecklistItem>> {
    let mut items = Vec::new();
    for line in raw.lines() {
        let trimmed = line.trim();
        let body = match strip_list_marker(trimmed) {
            Some(body) => body,
            None => continue,
        };
        let text = body.trim().trim_matches('*').trim_matches('"').trim().to_string();
        if text.is_empty() {
            continue;
        }
        if !text.ends_with('?') {
            return Err(Error::parse(
                format!("checklist line does not end with '?': {text:?}"),
                raw,
            ));
        }
        items.push(ChecklistItem { text, index: items.len() });
    }

    if items.is_empty() {
        return Err(Error::parse("no checklist question lines found", raw));
    }
    if policy == PolicyId::Ticking && !(2..=8).contains(&items.len()) {
        return Err(Error::parse(
            format!("ticking checklist must have 2-8 items, got {}", items.len()),
            raw,
        ));
    }
    Ok(items)
}

fn strip_list_marker(line: &str) -> Option<&str> {
    if let Some(rest) = line.strip_prefix('-').or_else(|| line.strip_prefix('*')) {
        return Some(rest);
    }
    let digits = line.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits == 0 {
        return None;
    }
    let rest = &line[digits..];
    rest.strip_prefix('.')
        .or_else(|| rest.strip_prefix(')'))
        .or_else(|| rest.strip_prefix(':'))
}

/// Parse a self-refine critique: a 1-5 rating line and a feedback line.
pub fn parse_critique(raw: &str) -> Result<(u8, String)> {
    let rating_pos = find_marker(raw, "rating:")
        .ok_or_else(|| Error::parse("no 'Rating:' marker in critique", raw))?;
    let after = &raw[rating_pos..];
    let digits: String = after
        .chars()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(|c| c.is_ascii_digit())
        .collect();
    let rating: u8 = digits
        .parse()
        .map_err(|_| Error::parse("no rating value after 'Rating:'", raw))?;
    if !(1..=5).contains(&rating) {
        return Err(Error::parse(
            format!("critique rating must be in [1,5], got {rating}"),
            raw,
        ));
    }
    let feedback_pos = find_marker(raw, "feedback:")
        .ok_or_else(|| Error::parse("no 'Feedback:' marker in critique", raw))?;
    let feedback = raw[feedback_pos + "feedback:".len()..].trim().to_string();
    if feedback.is_empty() {
        return Err(Error::parse("empty feedback in critique", raw));
    }
    Ok((rating, feedback))
}

/// Byte offset of the last case-insensitive occurrence of `marker`.
pub(crate) fn find_marker(raw: &str, marker: &str) -> Option<usize> {
    raw.to_ascii_lowercase().rfind(marker)
}

/// A successfully generated checklist plus every raw model output that led
/// to it, kept for audit.
#[derive(Debug, Clone)]
pub struct GenerationOutcome {
    pub checklist: Checklist,
    pub raw_outputs: Vec<String>,
}

/// Checklist generator bound to one endpoint and cassette.
pub struct ChecklistGenerator<'a> {
    pub client: &'a LlmClient,
    pub cassette: &'a Cassette,
    pub temperature: f64,
}

impl<'a> ChecklistGenerator<'a> {
    /// Generate under a single-call policy (baseline, specify, ticking),
    /// regenerating up to three total attempts on parse failure.
    pub async fn generate(
        &self,
        instance: &EvalInstance,
        policy: PolicyId,
    ) -> Result<GenerationOutcome> {
        match policy {
            PolicyId::Baseline | PolicyId::Specify | PolicyId::Ticking => {}
            PolicyId::LengthHalf | PolicyId::LengthX1_5 => {
                return Err(Error::Contract(
                    "scaled policies require a baseline checklist; use generate_scaled".into(),
                ))
            }
            PolicyId::SelfRefine => {
                return Err(Error::Contract(
                    "self_refine requires a baseline checklist; use self_refine".into(),
                ))
            }
        }
        let messages = build_generation_prompt(instance, policy);
        let mut raw_outputs = Vec::new();
        for attempt in 0..MAX_GENERATION_ATTEMPTS {
            let raw = self.call(&messages, attempt).await?;
            match parse_checklist(&raw, policy) {
                Ok(items) => {
                    raw_outputs.push(raw);
                    return Ok(GenerationOutcome {
                        checklist: Checklist {
                            instance_id: instance.id.clone(),
                            policy,
                            items,
                            generation_attempt: attempt + 1,
                            refine_feedback: None,
                        },
                        raw_outputs,
                    });
                }
                Err(_) => raw_outputs.push(raw),
            }
        }
        Err(Error::GenerationFailure {
            instance_id: instance.id.clone(),
            policy: policy.as_str().into(),
            raw_outputs,
        })
    }

    /// Generate a scaled checklist whose item count must equal
    /// round-half-away-from-zero(factor x |baseline|), floored at 1.
    pub async fn generate_scaled(
        &self,
        instance: &EvalInstance,
        baseline: &Checklist,
        factor: ScaleFactor,
    ) -> Result<GenerationOutcome> {
        if baseline.policy != PolicyId::Baseline {
            return Err(Error::Contract(format!(
                "generate_scaled requires a baseline checklist, got {}",
                baseline.policy
            )));
        }
        let policy = factor.policy();
        let target = scaled_target_count(baseline.items.len(), factor);
        let messages = build_length_prompt(instance, baseline, target);
        let mut raw_outputs = Vec::new();
        for attempt in 0..MAX_GENERATION_ATTEMPTS {
            let raw = self.call(&messages, attempt).await?;
            match parse_checklist(&raw, policy) {
                Ok(items) if items.len() == target => {
                    raw_outputs.push(raw);
                    return Ok(GenerationOutcome {
                        checklist: Checklist {
                            instance_id: instance.id.clone(),
                            policy,
                            items,
                            generation_attempt: attempt + 1,
                            refine_feedback: None,
                        },
                        raw_outputs,
                    });
                }
                _ => raw_outputs.push(raw),
            }
        }
        Err(Error::GenerationFailure {
            instance_id: instance.id.clone(),
            policy: policy.as_str().into(),
            raw_outputs,
        })
    }

    /// One critique/regenerate round: a rating-plus-feedback call followed
    /// by a regeneration call conditioned on the feedback. Critique parse
    /// failures consume the same three-attempt budget.
    pub async fn self_refine(
        &self,
        instance: &EvalInstance,
        baseline: &Checklist,
    ) -> Result<GenerationOutcome> {
        if baseline.policy != PolicyId::Baseline {
            return Err(Error::Contract(format!(
                "self_refine requires a baseline checklist, got {}",
                baseline.policy
            )));
        }
        let mut raw_outputs = Vec::new();
        let mut attempt = 0;
        while attempt < MAX_GENERATION_ATTEMPTS {
            let critique_raw = self
                .call(&build_critique_prompt(instance, baseline), attempt)
                .await?;
            let feedback = match parse_critique(&critique_raw) {
                Ok((_rating, feedback)) => {
                    raw_outputs.push(critique_raw);
                    feedback
                }
                Err(_) => {
                    raw_outputs.push(critique_raw);
                    attempt += 1;
                    continue;
                }
            };
            let regen_raw = self
                .call(&build_refine_prompt(instance, baseline, &feedback), attempt)
                .await?;
            raw_outputs.push(regen_raw.clone());
            match parse_checklist(&regen_raw, PolicyId::SelfRefine) {
                Ok(items) => {
                    return Ok(GenerationOutcome {
                        checklist: Checklist {
                            instance_id: instance.id.clone(),
                            policy: PolicyId::SelfRefine,
                            items,
                            generation_attempt: attempt + 1,
                            refine_feedback: Some(feedback),
                        },
                        raw_outputs,
                    });
                }
                Err(_) => {
                    attempt += 1;
                }
            }
        }
        Err(Error::GenerationFailure {
            instance_id: instance.id.clone(),
            policy: PolicyId::SelfRefine.as_str().into(),
            raw_outputs,
        })
    }

    async fn call(&self, messages: &[ChatMessage], attempt: u32) -> Result<String> {
        let request = ChatRequest {
            messages: messages.to_vec(),
            temperature: self.temperature,
            replicate_index: attempt,
        };
        self.client.complete(&request, self.cassette).await
    }

    /// Cassette key the generator would use for a given prompt and attempt,
    /// for fixture authoring.
    pub fn key_for(&self, messages: &[ChatMessage], attempt: u32) -> String {
        let request = ChatRequest {
            messages: messages.to_vec(),
            temperature: self.temperature,
            replicate_index: attempt,
        };
        cassette_key(self.client.model_name(), &request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_numbered_items() {
        let items = parse_checklist("1. Is X?\n2. Is Y?", PolicyId::Baseline).unwrap();
        assert_eq!(items.len(), 2);
        assert_eq!(items[0].text, "Is X?");
        assert_eq!(items[1].index, 1);
    }

    #[test]
    fn parses_bulleted_items() {
        let raw = "- Does it cite sources?\n- Is it polite?";
        let items = parse_checklist(raw, PolicyId::Baseline).unwrap();
        assert_eq!(items.len(), 2);
        assert_eq!(items[0].text, "Does it cite sources?");
    }

    #[test]
    fn prose_without_questions_is_a_parse_error() {
        let raw = "Here is a discussion of the task without any list.";
        assert!(matches!(
            parse_checklist(raw, PolicyId::Baseline),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn skips_preamble_keeps_numbered_lines() {
        let raw = "Sure, here is the checklist:\n1. Is the answer correct?\n2. Is it concise?";
        let items = parse_checklist(raw, PolicyId::Baseline).unwrap();
        assert_eq!(items.len(), 2);
    }

    #[test]
    fn enumerated_non_question_is_a_parse_error() {
        let raw = "1. The answer should be correct.";
        assert!(parse_checklist(raw, PolicyId::Baseline).is_err());
    }

    #[test]
    fn ticking_enforces_two_to_eight() {
        let nine: String = (1..=9).map(|i| format!("{i}. Is point {i} ok?\n")).collect();
        assert!(parse_checklist(&nine, PolicyId::Ticking).is_err());
        let one = "1. Is it ok?";
        assert!(parse_checklist(one, PolicyId::Ticking).is_err());
        let two = "1. Is it ok?\n2. Is it done?";
        assert_eq!(parse_checklist(two, PolicyId::Ticking).unwrap().len(), 2);
    }

    #[test]
    fn scaled_targets_follow_rounding_rule() {
        assert_eq!(scaled_target_count(6, ScaleFactor::Half), 3);
        assert_eq!(scaled_target_count(5, ScaleFactor::OneAndHalf), 8); // 7.5 rounds away
        assert_eq!(scaled_target_count(1, ScaleFactor::Half), 1); // floor at 1
        assert_eq!(scaled_target_count(4, ScaleFactor::OneAndHalf), 6);
    }

    #[test]
    fn critique_parses_rating_and_feedback() {
        let (rating, feedback) =
            parse_critique("Rating: 3\nFeedback: items too vague about word limit").unwrap();
        assert_eq!(rating, 3);
        assert_eq!(feedback, "items too vague about word limit");
    }

    #[test]
    fn critique_rating_out_of_range_is_a_parse_error() {
        assert!(parse_critique("Rating: 7\nFeedback: fine").is_err());
        assert!(parse_critique("Rating: 0\nFeedback: fine").is_err());
    }

    #[test]
    fn without_item_reindexes() {
        let c = Checklist {
            instance_id: "a".into(),
            policy: PolicyId::Baseline,
            items: vec![
                ChecklistItem { text: "Q0?".into(), index: 0 },
                ChecklistItem { text: "Q1?".into(), index: 1 },
                ChecklistItem { text: "Q2?".into(), index: 2 },
            ],
            generation_attempt: 1,
            refine_feedback: None,
        };
        let reduced = c.without_item(1);
        assert_eq!(reduced.items.len(), 2);
        assert_eq!(reduced.items[0].text, "Q0?");
        assert_eq!(reduced.items[1].text, "Q2?");
        assert_eq!(reduced.items[1].index, 1);
    }

    #[test]
    fn template_hashes_are_stable_and_distinct() {
        assert_eq!(template_hash(PolicyId::Baseline), template_hash(PolicyId::Baseline));
        assert_ne!(template_hash(PolicyId::Baseline), template_hash(PolicyId::Specify));
        assert_eq!(template_hash(PolicyId::LengthHalf), template_hash(PolicyId::LengthX1_5));
    }
}
