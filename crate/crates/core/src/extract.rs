//! Concept extraction: a deterministic syntactic chunker, an LLM-backed
//! extractor driven by a fixed template, and the grounding validator both
//! paths share.
//!
//! The chunker works from closed-class token lists only, so its output is
//! a pure function of the prompt text. Noun phrases are maximal runs of
//! open-class tokens after an optional determiner or numeral; each phrase
//! yields a composite concept, its head noun, and one attribute binding
//! per modifier. Adjacent phrases joined by an optional position verb and
//! at least one preposition yield a relation concept.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backends::{ChatBackend, ChatMessage, ChatParams};
use crate::domain::{fold_text, ConceptKind, ConceptSet, Prompt};
use crate::error::{Error, Result};

const DETERMINERS: &[&str] = &["a", "an", "the"];
/// Numerals sit in the determiner slot of a noun phrase but are kept as
/// substantive tokens: they join the phrase text and must ground.
const NUMERALS: &[&str] = &[
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
];
const PREPOSITIONS: &[&str] = &[
    "on", "under", "above", "below", "next", "to", "of", "in", "behind", "left", "right", "with",
    "between",
];
const POSITION_VERBS: &[&str] = &["is", "are", "stands", "sits", "lies", "holding"];
/// Degenerate modifiers that never carry visual content of their own.
const EXTRA_STOPWORDS: &[&str] = &["colored", "very"];

/// Where a concept set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionSource {
    Syntactic,
    Llm,
    FallbackWholePrompt,
}

/// Why an extracted phrase was dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DropReason {
    #[serde(rename = "not-grounded-in-prompt")]
    NotGroundedInPrompt,
    #[serde(rename = "duplicate")]
    Duplicate,
    #[serde(rename = "over-k-max")]
    OverKMax,
    #[serde(rename = "empty")]
    Empty,
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DropReason::NotGroundedInPrompt => "not-grounded-in-prompt",
            DropReason::Duplicate => "duplicate",
            DropReason::OverKMax => "over-k-max",
            DropReason::Empty => "empty",
        };
        f.write_str(s)
    }
}

/// Audit trail for one extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionReport {
    pub source: ExtractionSource,
    pub raw_llm_output: Option<String>,
    pub dropped: Vec<(String, DropReason)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TokenClass {
    Determiner,
    Numeral,
    Preposition,
    Verb,
    Open,
}

fn classify(token: &str) -> TokenClass {
    if DETERMINERS.contains(&token) {
        TokenClass::Determiner
    } else if NUMERALS.contains(&token) {
        TokenClass::Numeral
    } else if PREPOSITIONS.contains(&token) {
        TokenClass::Preposition
    } else if POSITION_VERBS.contains(&token) {
        TokenClass::Verb
    } else {
        TokenClass::Open
    }
}

fn is_stopword(token: &str) -> bool {
    DETERMINERS.contains(&token)
        || PREPOSITIONS.contains(&token)
        || POSITION_VERBS.contains(&token)
        || EXTRA_STOPWORDS.contains(&token)
}

/// Whitespace tokenization with punctuation stripped from token edges and
/// case folded. Tokens that are pure punctuation vanish.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// A noun phrase: kept tokens (numeral prefix plus open-class run).
#[derive(Debug)]
struct NounPhrase {
    tokens: Vec<String>,
    /// Index into the token stream where the phrase ends (exclusive).
    end: usize,
}

impl NounPhrase {
    fn head(&self) -> &str {
        self.tokens.last().expect("noun phrase has tokens")
    }
}

fn chunk_noun_phrases(tokens: &[String]) -> Vec<NounPhrase> {
    let classes: Vec<TokenClass> = tokens.iter().map(|t| classify(t)).collect();
    let mut phrases = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        match classes[i] {
            TokenClass::Open | TokenClass::Numeral => {
                let mut kept = Vec::new();
                if classes[i] == TokenClass::Numeral {
                    kept.push(tokens[i].clone());
                    i += 1;
                }
                let open_start = i;
                while i < tokens.len() && classes[i] == TokenClass::Open {
                    kept.push(tokens[i].clone());
                    i += 1;
                }
                if i == open_start {
                    // Lone numeral with no open-class run: not a phrase.
                    continue;
                }
                phrases.push(NounPhrase { tokens: kept, end: i });
            }
            _ => i += 1,
        }
    }
    phrases
}

/// Deduplicates by folded text, records drops, and caps at `k_max`.
fn assemble(
    prompt: &Prompt,
    items: Vec<(String, ConceptKind)>,
    k_max: usize,
    source: ExtractionSource,
    raw_llm_output: Option<String>,
    mut dropped: Vec<(String, DropReason)>,
) -> Result<(ConceptSet, ExtractionReport)> {
    let mut seen = HashSet::new();
    let mut kept = Vec::new();
    for (text, kind) in items {
        if !seen.insert(fold_text(&text)) {
            dropped.push((text, DropReason::Duplicate));
        } else if kept.len() == k_max {
            dropped.push((text, DropReason::OverKMax));
        } else {
            kept.push((text, kind));
        }
    }
    let set = ConceptSet::new(prompt.id.clone(), kept, k_max)?;
    Ok((
        set,
        ExtractionReport {
            source,
            raw_llm_output,
            dropped,
        },
    ))
}

/// Rule-based concept extraction. Pure function of the prompt text:
/// identical input yields identical output.
pub fn extract_syntactic(prompt: &Prompt, k_max: usize) -> Result<(ConceptSet, ExtractionReport)> {
    let tokens = tokenize(&prompt.text);
    let classes: Vec<TokenClass> = tokens.iter().map(|t| classify(t)).collect();
    let phrases = chunk_noun_phrases(&tokens);

    if phrases.is_empty() {
        // No extractable noun phrase: the whole prompt becomes the one
        // concept (normalized through the tokenizer so no comma survives).
        let text = tokens.join(" ");
        if text.is_empty() {
            return Err(Error::InvalidInput(
                "prompt has no extractable content".into(),
            ));
        }
        return assemble(
            prompt,
            vec![(text, ConceptKind::Composite)],
            k_max,
            ExtractionSource::FallbackWholePrompt,
            None,
            Vec::new(),
        );
    }

    let mut items: Vec<(String, ConceptKind)> = Vec::new();
    for phrase in &phrases {
        if phrase.tokens.len() >= 2 {
            items.push((phrase.tokens.join(" "), ConceptKind::Composite));
        }
        items.push((phrase.head().to_string(), ConceptKind::Object));
        for modifier in &phrase.tokens[..phrase.tokens.len() - 1] {
            items.push((
                format!("{modifier} {}", phrase.head()),
                ConceptKind::AttributeBinding,
            ));
        }
    }

    // Relations: NP1 (verb?) preposition+ NP2 over adjacent phrase pairs.
    for pair in phrases.windows(2) {
        let gap_start = pair[0].end;
        let gap_end = pair[1].end - pair[1].tokens.len();
        let connector: Vec<&str> = (gap_start..gap_end.min(tokens.len()))
            .filter(|&i| matches!(classes[i], TokenClass::Verb | TokenClass::Preposition))
            .map(|i| tokens[i].as_str())
            .collect();
        if connector.iter().any(|t| PREPOSITIONS.contains(t)) {
            let text = format!(
                "{} {} {}",
                pair[0].head(),
                connector.join(" "),
                pair[1].head()
            );
            items.push((text, ConceptKind::Relation));
        }
    }

    assemble(
        prompt,
        items,
        k_max,
        ExtractionSource::Syntactic,
        None,
        Vec::new(),
    )
}

/// Template rendered for the LLM extractor.
const EXTRACTION_TEMPLATE: &str = "Task:
Extract multiple essential key or compositional phrases from the image description. These phrases should represent:
- Visually grounded object descriptions
- Compositional variants (e.g., Big wooden teddy -> big teddy, wooden teddy)
- Object-Subject-Relation (e.g., big wooden teddy stands under green tree -> teddy stands under tree)

Do not add extra interpretation or paraphrasing. Extract only from the sentence.
Generate only extracted tokens in comma-separated format (e.g. big teddy, wooden teddy, teddy stand under tree, ...)

###image description: {init_description}
###extracted tokens:";

/// Renders the extraction template with the prompt text substituted.
pub fn build_extraction_prompt(prompt: &Prompt) -> String {
    EXTRACTION_TEMPLATE.replace("{init_description}", &prompt.text)
}

fn plural_stem_match(a: &str, b: &str) -> bool {
    a == b || a.strip_suffix('s') == Some(b) || b.strip_suffix('s') == Some(a)
}

/// A phrase is kept iff every non-stopword token appears as a token of
/// the prompt (case-folded; a token also matches if one is the other plus
/// a trailing "s"). Duplicates are dropped and the kept list is truncated
/// to `k_max` preserving order.
pub fn validate_grounding(
    phrases: &[String],
    prompt: &Prompt,
    k_max: usize,
) -> (Vec<String>, Vec<(String, DropReason)>) {
    let prompt_tokens = tokenize(&prompt.text);
    let mut kept: Vec<String> = Vec::new();
    let mut kept_folded = HashSet::new();
    let mut dropped = Vec::new();

    for raw in phrases {
        let text = fold_text(raw);
        if text.is_empty() {
            dropped.push((raw.clone(), DropReason::Empty));
            continue;
        }
        let grounded = tokenize(&text)
            .iter()
            .filter(|t| !is_stopword(t))
            .all(|t| prompt_tokens.iter().any(|p| plural_stem_match(t, p)));
        if !grounded {
            dropped.push((text, DropReason::NotGroundedInPrompt));
            continue;
        }
        if !kept_folded.insert(text.clone()) {
            dropped.push((text, DropReason::Duplicate));
            continue;
        }
        if kept.len() == k_max {
            dropped.push((text, DropReason::OverKMax));
            continue;
        }
        kept.push(text);
    }
    (kept, dropped)
}

fn classify_phrase(text: &str) -> ConceptKind {
    let tokens = tokenize(text);
    if tokens
        .iter()
        .any(|t| PREPOSITIONS.contains(&t.as_str()) || POSITION_VERBS.contains(&t.as_str()))
    {
        ConceptKind::Relation
    } else {
        match tokens.len() {
            0 | 1 => ConceptKind::Object,
            2 => ConceptKind::AttributeBinding,
            _ => ConceptKind::Composite,
        }
    }
}

/// LLM-backed extraction: renders the template, splits the reply on
/// commas, grounds every phrase against the prompt, and falls back to the
/// syntactic path when nothing survives.
pub fn extract_llm(
    prompt: &Prompt,
    chat: &dyn ChatBackend,
    k_max: usize,
) -> Result<(ConceptSet, ExtractionReport)> {
    let message = ChatMessage {
        role: "user".to_string(),
        content: build_extraction_prompt(prompt),
    };
    let params = ChatParams {
        temperature: 0.0,
        max_tokens: 512,
        seed: None,
    };
    let reply = chat.complete(&[message], &params)?;

    let phrases: Vec<String> = reply
        .split(',')
        .map(|p| p.trim().to_string())
        .filter(|p| !p.is_empty())
        .collect();
    if phrases.is_empty() {
        let (set, report) = extract_syntactic(prompt, k_max)?;
        return Ok((
            set,
            ExtractionReport {
                raw_llm_output: Some(reply),
                ..report
            },
        ));
    }

    let (kept, dropped) = validate_grounding(&phrases, prompt, k_max);
    if kept.is_empty() {
        let (set, report) = extract_syntactic(prompt, k_max)?;
        let mut merged = dropped;
        merged.extend(report.dropped);
        return Ok((
            set,
            ExtractionReport {
                source: report.source,
                raw_llm_output: Some(reply),
                dropped: merged,
            },
        ));
    }

    let items = kept
        .into_iter()
        .map(|text| {
            let kind = classify_phrase(&text);
            (text, kind)
        })
        .collect();
    assemble(
        prompt,
        items,
        k_max,
        ExtractionSource::Llm,
        Some(reply),
        dropped,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prompt(text: &str) -> Prompt {
        Prompt::new("p0", text).unwrap()
    }

    fn texts(set: &ConceptSet) -> Vec<&str> {
        set.texts().collect()
    }

    #[test]
    fn teddy_example_contains_appendix_decompositions() {
        let (set, report) =
            extract_syntactic(&prompt("Big wooden teddy stands under green tree"), 12).unwrap();
        let got: HashSet<&str> = texts(&set).into_iter().collect();
        for expected in ["big teddy", "wooden teddy", "teddy stands under tree"] {
            assert!(got.contains(expected), "missing {expected:?} in {got:?}");
        }
        assert_eq!(report.source, ExtractionSource::Syntactic);
    }

    #[test]
    fn blue_colored_pizza_yields_exact_set() {
        let (set, _) = extract_syntactic(&prompt("A blue colored pizza"), 12).unwrap();
        let got: HashSet<&str> = texts(&set).into_iter().collect();
        let want: HashSet<&str> =
            ["blue pizza", "colored pizza", "pizza", "blue colored pizza"]
                .into_iter()
                .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn single_noun_yields_single_object() {
        let (set, _) = extract_syntactic(&prompt("pizza"), 12).unwrap();
        assert_eq!(set.k, 1);
        assert_eq!(set.concepts[0].text, "pizza");
        assert_eq!(set.concepts[0].kind, ConceptKind::Object);
    }

    #[test]
    fn closed_class_only_prompt_falls_back_to_whole_prompt() {
        let (set, report) = extract_syntactic(&prompt("on the in"), 12).unwrap();
        assert_eq!(set.k, 1);
        assert_eq!(set.concepts[0].text, "on the in");
        assert_eq!(report.source, ExtractionSource::FallbackWholePrompt);
    }

    #[test]
    fn numerals_are_kept_in_phrases() {
        let (set, _) = extract_syntactic(&prompt("two cats on a mat"), 12).unwrap();
        let got: HashSet<&str> = texts(&set).into_iter().collect();
        assert!(got.contains("two cats"));
        assert!(got.contains("cats"));
        assert!(got.contains("cats on mat"));
    }

    #[test]
    fn extraction_is_deterministic() {
        let p = prompt("A red ball next to three green cubes");
        let a = extract_syntactic(&p, 12).unwrap();
        let b = extract_syntactic(&p, 12).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn grounding_examples() {
        let p = prompt("A blue colored pizza");
        let (kept, dropped) = validate_grounding(&["blue pizza".to_string()], &p, 12);
        assert_eq!(kept, ["blue pizza"]);
        assert!(dropped.is_empty());

        let (kept, dropped) = validate_grounding(&["red pizza".to_string()], &p, 12);
        assert!(kept.is_empty());
        assert_eq!(dropped[0].1, DropReason::NotGroundedInPrompt);

        let p = prompt("two cat on a mat");
        let (kept, _) = validate_grounding(&["two cats".to_string()], &p, 12);
        assert_eq!(kept, ["two cats"]);
    }

    #[test]
    fn grounding_rejects_wrong_numeral() {
        let p = prompt("two cat on a mat");
        let (kept, dropped) = validate_grounding(&["three cats".to_string()], &p, 12);
        assert!(kept.is_empty());
        assert_eq!(dropped[0].1, DropReason::NotGroundedInPrompt);
    }

    #[test]
    fn all_emitted_concepts_are_grounded() {
        for text in [
            "Big wooden teddy stands under green tree",
            "A blue colored pizza",
            "two cats on a mat with one dog",
            "a bowl of soup between the red chair and a lamp",
        ] {
            let p = prompt(text);
            let (set, _) = extract_syntactic(&p, 12).unwrap();
            let phrase_texts: Vec<String> = set.texts().map(str::to_string).collect();
            let (kept, dropped) = validate_grounding(&phrase_texts, &p, 12);
            assert_eq!(kept.len(), set.k, "dropped: {dropped:?}");
        }
    }

    #[test]
    fn composite_reextraction_invents_nothing() {
        let p = prompt("Big wooden teddy stands under green tree");
        let (set, _) = extract_syntactic(&p, 12).unwrap();
        for concept in set
            .concepts
            .iter()
            .filter(|c| c.kind == ConceptKind::Composite)
        {
            let inner = Prompt::new("inner", concept.text.clone()).unwrap();
            let (inner_set, _) = extract_syntactic(&inner, 12).unwrap();
            let allowed: HashSet<String> = tokenize(&concept.text).into_iter().collect();
            for c in &inner_set.concepts {
                for token in tokenize(&c.text) {
                    assert!(allowed.contains(&token), "invented token {token:?}");
                }
            }
        }
    }

    #[test]
    fn k_max_caps_output() {
        let p = prompt("red cat blue dog green tree small lamp old chair big table");
        let (set, report) = extract_syntactic(&p, 3).unwrap();
        assert_eq!(set.k, 3);
        assert!(report
            .dropped
            .iter()
            .any(|(_, r)| *r == DropReason::OverKMax));
    }

    #[test]
    fn extraction_template_golden() {
        let p = prompt("Big wooden teddy stands under green tree");
        let rendered = build_extraction_prompt(&p);
        let golden = include_str!("../fixtures/extraction_prompt_teddy.golden.txt");
        assert_eq!(rendered, golden);
    }

    struct FixedChat(String);

    impl ChatBackend for FixedChat {
        fn complete(&self, _: &[ChatMessage], _: &ChatParams) -> crate::error::Result<String> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn llm_reply_splits_into_grounded_concepts() {
        let chat = FixedChat("big teddy, wooden teddy, teddy stands under tree".into());
        let p = prompt("Big wooden teddy stands under green tree");
        let (set, report) = extract_llm(&p, &chat, 12).unwrap();
        assert_eq!(set.k, 3);
        assert_eq!(report.source, ExtractionSource::Llm);
        assert_eq!(
            texts(&set),
            ["big teddy", "wooden teddy", "teddy stands under tree"]
        );
    }

    #[test]
    fn empty_llm_reply_falls_back_to_syntactic() {
        let chat = FixedChat(String::new());
        let p = prompt("A blue colored pizza");
        let (set, report) = extract_llm(&p, &chat, 12).unwrap();
        assert_eq!(report.source, ExtractionSource::Syntactic);
        assert_eq!(report.raw_llm_output.as_deref(), Some(""));
        assert!(texts(&set).contains(&"blue pizza"));
    }

    #[test]
    fn llm_duplicates_and_inventions_are_dropped() {
        let chat = FixedChat("big teddy, big teddy, purple dragon".into());
        let p = prompt("big teddy on chair");
        let (set, report) = extract_llm(&p, &chat, 12).unwrap();
        assert_eq!(texts(&set), ["big teddy"]);
        assert_eq!(
            report.dropped,
            vec![
                ("big teddy".to_string(), DropReason::Duplicate),
                ("purple dragon".to_string(), DropReason::NotGroundedInPrompt),
            ]
        );
    }

    #[test]
    fn fully_ungrounded_llm_reply_falls_back_to_syntactic() {
        let chat = FixedChat("purple dragon, golden castle".into());
        let p = prompt("A blue colored pizza");
        let (set, report) = extract_llm(&p, &chat, 12).unwrap();
        assert_eq!(report.source, ExtractionSource::Syntactic);
        assert!(texts(&set).contains(&"pizza"));
        assert!(report
            .dropped
            .iter()
            .any(|(t, r)| t == "purple dragon" && *r == DropReason::NotGroundedInPrompt));
    }
}
