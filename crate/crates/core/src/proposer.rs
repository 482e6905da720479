//! Rewrite proposal: renders the rephrasing template with score-annotated
//! history and parses the model's numbered reply into validated candidate
//! texts.

use std::collections::HashSet;

use crate::backends::{ChatBackend, ChatMessage, ChatParams};
use crate::domain::{fold_text, word_count, ConceptSet, Prompt, RejectReason};
use crate::error::Result;

/// One pool member rendered into the template's examples block.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub rewrite_text: String,
    pub global: f64,
    /// (concept text, score) pairs aligned with the run's concept set.
    /// Empty in global-only mode: the baseline feeds back no token-level
    /// signal.
    pub per_concept_pairs: Vec<(String, f64)>,
}

/// A rewrite must stay under this many words.
pub const WORD_LIMIT: usize = 77;

const REFINEMENT_TEMPLATE: &str = "You need to expand and rephrase the provided description for image generation to make the best image, by maximizing the image score:

- Overall score: how well the full description matches the generated image.
- Word scores: how well individual key tokens (objects, attributes, relations) from the description align with the image.

Current Description:
{init_description}

Here are some example rephrases and the corresponding image scores and token-level alignment scores:
{descriptions}

Instruction:
Generate {n_request} new descriptions that maximize both the overall and token-level scores. Produce substantive rewrites that strengthen weak tokens and preserve high-scored tokens from prior examples. Place each instruction on a separate line, with a numeric counter (e.g., \"1. ... 2. ...\"), and ensure each is concise (<77 words).";

/// Renders one history entry: 3-decimal overall, 2-decimal token scores,
/// so golden tests can be byte-exact.
fn render_history_entry(entry: &HistoryEntry) -> String {
    let mut line = format!("\"{}\" | overall: {:.3}", entry.rewrite_text, entry.global);
    if !entry.per_concept_pairs.is_empty() {
        let tokens = entry
            .per_concept_pairs
            .iter()
            .map(|(name, score)| format!("{name}={score:.2}"))
            .collect::<Vec<_>>()
            .join(", ");
        line.push_str(" | tokens: ");
        line.push_str(&tokens);
    }
    line
}

/// Renders the rephrasing template. Pure function of its arguments.
pub fn build_refinement_prompt(
    original: &Prompt,
    concepts: &ConceptSet,
    history: &[HistoryEntry],
    n_request: usize,
) -> String {
    debug_assert!(history.iter().all(|e| {
        e.per_concept_pairs.is_empty()
            || e.per_concept_pairs
                .iter()
                .map(|(name, _)| name.as_str())
                .eq(concepts.texts())
    }));
    let descriptions = history
        .iter()
        .map(render_history_entry)
        .collect::<Vec<_>>()
        .join("\n");
    REFINEMENT_TEMPLATE
        .replace("{init_description}", &original.text)
        .replace("{descriptions}", &descriptions)
        .replace("{n_request}", &n_request.to_string())
}

/// Renders texts as the numbered list the template asks for. Inverse of
/// [`parse_candidates`] on well-formed lists.
pub fn render_numbered(texts: &[String]) -> String {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{}. {}", i + 1, t))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Splits a reply into numbered candidate lines. A line is accepted when
/// it matches optional whitespace, digits, ". ", then a non-empty text
/// that is under the word limit and duplicates neither `existing_texts`
/// (case-folded pool texts) nor an earlier accepted line.
pub fn parse_candidates(
    reply: &str,
    existing_texts: &HashSet<String>,
) -> (Vec<String>, Vec<(String, RejectReason)>) {
    let mut accepted: Vec<String> = Vec::new();
    let mut accepted_folded: HashSet<String> = HashSet::new();
    let mut rejected: Vec<(String, RejectReason)> = Vec::new();

    for line in reply.lines() {
        let stripped = line.trim_start();
        if stripped.trim().is_empty() {
            rejected.push((line.to_string(), RejectReason::Empty));
            continue;
        }
        let digits_len = stripped.chars().take_while(|c| c.is_ascii_digit()).count();
        let text = if digits_len > 0 {
            stripped[digits_len..].strip_prefix(". ")
        } else {
            None
        };
        let Some(text) = text else {
            rejected.push((line.to_string(), RejectReason::NoNumericCounter));
            continue;
        };
        let text = text.trim();
        if text.is_empty() {
            rejected.push((line.to_string(), RejectReason::Empty));
            continue;
        }
        if word_count(text) >= WORD_LIMIT {
            rejected.push((text.to_string(), RejectReason::OverWordLimit));
            continue;
        }
        let folded = fold_text(text);
        if existing_texts.contains(&folded) {
            rejected.push((text.to_string(), RejectReason::DuplicateOfPool));
            continue;
        }
        if !accepted_folded.insert(folded) {
            rejected.push((text.to_string(), RejectReason::DuplicateInBatch));
            continue;
        }
        accepted.push(text.to_string());
    }
    (accepted, rejected)
}

/// Build, call, parse. Returns up to `n_request` accepted texts; an
/// under-filled batch is returned as-is (the caller decides whether to
/// re-request once on zero accepts).
#[allow(clippy::too_many_arguments)]
pub fn propose(
    chat: &dyn ChatBackend,
    original: &Prompt,
    concepts: &ConceptSet,
    history: &[HistoryEntry],
    n_request: usize,
    existing_texts: &HashSet<String>,
    temperature: f64,
    seed: Option<u64>,
) -> Result<(Vec<String>, Vec<(String, RejectReason)>)> {
    let content = build_refinement_prompt(original, concepts, history, n_request);
    // Room for n_request lines of up to 76 words each.
    let max_tokens = (256 + 128 * n_request).min(16_384);
    let reply = chat.complete(
        &[ChatMessage {
            role: "user".to_string(),
            content,
        }],
        &ChatParams {
            temperature,
            max_tokens,
            seed,
        },
    )?;
    let (mut accepted, rejected) = parse_candidates(&reply, existing_texts);
    accepted.truncate(n_request);
    Ok((accepted, rejected))
}
