//! Core data types shared by every other module: prompts, concepts,
//! score cards, candidates, the elitist pool, run configuration, and the
//! per-iteration trace record.
//!
//! All types are immutable values once constructed and safe to share
//! across threads; pool mutation happens only inside the optimizer's
//! single-writer step.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Case-folds and collapses whitespace. This is the identity used wherever
/// two pieces of prompt text are compared (pool dedupe, concept dedupe,
/// duplicate rejection in the proposal parser).
pub fn fold_text(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Whitespace-delimited token count.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// An input prompt `P`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub text: String,
    pub word_count: usize,
}

impl Prompt {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::InvalidInput("prompt text is empty".into()));
        }
        Ok(Self {
            id: id.into(),
            word_count: word_count(&text),
            text,
        })
    }
}

/// What a concept names: a bare object, an (attribute, head) binding, a
/// relation between two heads, or a whole noun phrase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConceptKind {
    Object,
    AttributeBinding,
    Relation,
    Composite,
}

/// One extracted concept `c_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    /// 0-based position within its [`ConceptSet`].
    pub index: usize,
    pub text: String,
    pub kind: ConceptKind,
}

/// The ordered set of concepts extracted from one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSet {
    pub prompt_id: String,
    pub concepts: Vec<Concept>,
    pub k: usize,
}

impl ConceptSet {
    /// Builds a set from (text, kind) pairs, enforcing all invariants:
    /// k >= 1, k <= k_max, no commas, texts pairwise distinct after
    /// case-folding and whitespace normalization.
    pub fn new(
        prompt_id: impl Into<String>,
        items: Vec<(String, ConceptKind)>,
        k_max: usize,
    ) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidInput("concept set must hold at least one concept".into()));
        }
        if items.len() > k_max {
            return Err(Error::InvalidInput(format!(
                "concept set holds {} concepts, k_max is {k_max}",
                items.len()
            )));
        }
        let mut seen = HashSet::new();
        let mut concepts = Vec::with_capacity(items.len());
        for (index, (text, kind)) in items.into_iter().enumerate() {
            if text.trim().is_empty() {
                return Err(Error::InvalidInput("concept text is empty".into()));
            }
            if text.contains(',') {
                return Err(Error::InvalidInput(format!(
                    "concept text contains a comma: {text:?}"
                )));
            }
            if !seen.insert(fold_text(&text)) {
                return Err(Error::InvalidInput(format!(
                    "duplicate concept text: {text:?}"
                )));
            }
            concepts.push(Concept { index, text, kind });
        }
        let k = concepts.len();
        Ok(Self {
            prompt_id: prompt_id.into(),
            concepts,
            k,
        })
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.concepts.iter().map(|c| c.text.as_str())
    }
}

/// Reference to a stored generated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub candidate_id: String,
    /// Hex-encoded SHA-256 of the image bytes.
    pub content_digest: String,
    /// Path relative to the run directory.
    pub storage_path: String,
    pub generator_seed: u64,
    pub generator_meta: BTreeMap<String, String>,
}

/// Which objective the run optimizes: the global score alone, or the
/// global score plus the mean of the per-concept scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveMode {
    GlobalOnly,
    ConceptAware,
}

impl fmt::Display for ObjectiveMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObjectiveMode::GlobalOnly => write!(f, "global_only"),
            ObjectiveMode::ConceptAware => write!(f, "concept_aware"),
        }
    }
}

/// Global score, per-concept score vector, and the aggregate objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCard {
    pub global: f64,
    pub per_concept: Vec<f64>,
    pub aggregate: f64,
    pub objective_mode: ObjectiveMode,
}

impl ScoreCard {
    /// Checks index alignment with the run's concept set and the
    /// aggregate arithmetic for the card's mode.
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.per_concept.len() != k {
            return Err(Error::InvalidInput(format!(
                "per_concept length {} does not match k = {k}",
                self.per_concept.len()
            )));
        }
        let expected = match self.objective_mode {
            ObjectiveMode::GlobalOnly => self.global,
            ObjectiveMode::ConceptAware => {
                let mean = self.per_concept.iter().sum::<f64>() / self.per_concept.len() as f64;
                self.global + mean
            }
        };
        if (self.aggregate - expected).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!(
                "aggregate {} does not match recomputed {expected}",
                self.aggregate
            )));
        }
        Ok(())
    }
}

/// A scored rewrite: candidate prompt text, its generated image, scores,
/// and lineage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub rewrite_text: String,
    pub image: ImageRef,
    pub scores: ScoreCard,
    pub born_iteration: u32,
    pub parent_ids: Vec<String>,
}

/// Total deterministic order over candidates: aggregate descending, then
/// rewrite text ascending, then id ascending. Ties cannot survive all
/// three keys, so the order is total.
pub fn candidate_cmp(a: &Candidate, b: &Candidate) -> Ordering {
    b.scores
        .aggregate
        .total_cmp(&a.scores.aggregate)
        .then_with(|| a.rewrite_text.cmp(&b.rewrite_text))
        .then_with(|| a.id.cmp(&b.id))
}

/// The elitist candidate pool carried between iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pool {
    capacity: usize,
    members: Vec<Candidate>,
}

impl Pool {
    pub fn empty(capacity: usize) -> Self {
        Self {
            capacity,
            members: Vec::new(),
        }
    }

    /// Retains the top `capacity` candidates under [`candidate_cmp`],
    /// dropping all but the best-ranked candidate for each case-folded
    /// rewrite text. Stable under input permutation because the order is
    /// total.
    pub fn select_top_k(mut candidates: Vec<Candidate>, capacity: usize) -> Self {
        candidates.sort_by(candidate_cmp);
        let mut seen = HashSet::new();
        let mut members = Vec::new();
        for candidate in candidates {
            if members.len() == capacity {
                break;
            }
            if seen.insert(fold_text(&candidate.rewrite_text)) {
                members.push(candidate);
            }
        }
        Self { capacity, members }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn members(&self) -> &[Candidate] {
        &self.members
    }

    /// Head of the pool, i.e. the best candidate seen so far.
    pub fn best(&self) -> Option<&Candidate> {
        self.members.first()
    }

    pub fn folded_texts(&self) -> HashSet<String> {
        self.members
            .iter()
            .map(|c| fold_text(&c.rewrite_text))
            .collect()
    }
}

/// How the run obtains its concept set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMode {
    #[default]
    Syntactic,
    Llm,
}

/// Endpoint URLs and model names for the three external model roles.
/// Credentials come from environment variables, never from this file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    #[serde(default)]
    pub chat_endpoint: Option<String>,
    #[serde(default)]
    pub chat_model: String,
    #[serde(default)]
    pub embed_endpoint: Option<String>,
    #[serde(default)]
    pub embed_model: String,
    #[serde(default)]
    pub image_endpoint: Option<String>,
    #[serde(default)]
    pub image_model: String,
}

fn default_batch_size() -> usize {
    50
}
fn default_retain_k() -> usize {
    20
}
fn default_iterations() -> u32 {
    10
}
fn default_objective_mode() -> ObjectiveMode {
    ObjectiveMode::ConceptAware
}
fn default_k_max() -> usize {
    12
}
fn default_concurrency_limit() -> usize {
    4
}
fn default_images_per_candidate() -> usize {
    1
}

/// Run configuration with the paper's schedule as defaults: 50 proposals
/// per iteration, top 20 retained, 10 iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_retain_k")]
    pub retain_k: usize,
    #[serde(default = "default_iterations")]
    pub iterations: u32,
    #[serde(default = "default_objective_mode")]
    pub objective_mode: ObjectiveMode,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default = "default_concurrency_limit")]
    pub concurrency_limit: usize,
    #[serde(default)]
    pub early_stop_patience: Option<u32>,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_images_per_candidate")]
    pub images_per_candidate: usize,
    #[serde(default)]
    pub extraction: ExtractionMode,
    #[serde(default)]
    pub backends: BackendsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            batch_size: default_batch_size(),
            retain_k: default_retain_k(),
            iterations: default_iterations(),
            objective_mode: default_objective_mode(),
            k_max: default_k_max(),
            concurrency_limit: default_concurrency_limit(),
            early_stop_patience: None,
            rng_seed: 0,
            images_per_candidate: default_images_per_candidate(),
            extraction: ExtractionMode::default(),
            backends: BackendsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.retain_k < 1 {
            return Err(Error::InvalidConfig("retain_k must be >= 1".into()));
        }
        if self.iterations < 1 {
            return Err(Error::InvalidConfig("iterations must be >= 1".into()));
        }
        if self.k_max < 1 {
            return Err(Error::InvalidConfig("k_max must be >= 1".into()));
        }
        if self.concurrency_limit < 1 {
            return Err(Error::InvalidConfig("concurrency_limit must be >= 1".into()));
        }
        if self.images_per_candidate < 1 {
            return Err(Error::InvalidConfig(
                "images_per_candidate must be >= 1".into(),
            ));
        }
        if let Some(p) = self.early_stop_patience {
            if p < 1 {
                return Err(Error::InvalidConfig(
                    "early_stop_patience must be >= 1 when set".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Parses raw config (a JSON document from file or flags) into a
/// [`RunConfig`] with defaults filled, and validates every invariant.
/// retain_k may exceed batch_size: the pool simply fills over iterations.
pub fn validate_config(raw: &serde_json::Value) -> Result<RunConfig> {
    let config: RunConfig = serde_json::from_value(raw.clone())
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Why the proposal parser refused a line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    NoNumericCounter,
    Empty,
    /// 77 words or more.
    OverWordLimit,
    DuplicateOfPool,
    DuplicateInBatch,
}

impl RejectReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            RejectReason::NoNumericCounter => "no-numeric-counter",
            RejectReason::Empty => "empty",
            RejectReason::OverWordLimit => "\u{2265}77-words",
            RejectReason::DuplicateOfPool => "duplicate-of-pool",
            RejectReason::DuplicateInBatch => "duplicate-in-batch",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RejectReason {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no-numeric-counter" => Ok(RejectReason::NoNumericCounter),
            "empty" => Ok(RejectReason::Empty),
            "\u{2265}77-words" => Ok(RejectReason::OverWordLimit),
            "duplicate-of-pool" => Ok(RejectReason::DuplicateOfPool),
            "duplicate-in-batch" => Ok(RejectReason::DuplicateInBatch),
            other => Err(Error::Data(format!("unknown reject reason: {other:?}"))),
        }
    }
}

/// Final status of one proposed line within an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseStatus {
    Accepted,
    Rejected(RejectReason),
    /// Accepted by the parser but failed generation or scoring.
    ScoreFailed,
}

impl fmt::Display for ParseStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseStatus::Accepted => f.write_str("accepted"),
            ParseStatus::Rejected(reason) => write!(f, "rejected:{reason}"),
            ParseStatus::ScoreFailed => f.write_str("score-failed"),
        }
    }
}

impl FromStr for ParseStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accepted" => Ok(ParseStatus::Accepted),
            "score-failed" => Ok(ParseStatus::ScoreFailed),
            other => match other.strip_prefix("rejected:") {
                Some(reason) => Ok(ParseStatus::Rejected(reason.parse()?)),
                None => Err(Error::Data(format!("unknown parse status: {other:?}"))),
            },
        }
    }
}

impl Serialize for ParseStatus {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ParseStatus {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Append-only trace of one optimizer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    pub proposed: Vec<(String, ParseStatus)>,
    pub scored_candidate_ids: Vec<String>,
    pub retained_ids: Vec<String>,
    pub best_aggregate: f64,
    pub wall_time_ms: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn candidate(id: &str, text: &str, aggregate: f64) -> Candidate {
        Candidate {
            id: id.to_string(),
            rewrite_text: text.to_string(),
            image: ImageRef {
                candidate_id: id.to_string(),
                content_digest: "d".repeat(64),
                storage_path: format!("images/{id}.png"),
                generator_seed: 0,
                generator_meta: BTreeMap::new(),
            },
            scores: ScoreCard {
                global: aggregate,
                per_concept: vec![],
                aggregate,
                objective_mode: ObjectiveMode::GlobalOnly,
            },
            born_iteration: 0,
            parent_ids: vec![],
        }
    }

    #[test]
    fn empty_config_yields_paper_defaults() {
        let config = validate_config(&json!({})).unwrap();
        assert_eq!(config.batch_size, 50);
        assert_eq!(config.retain_k, 20);
        assert_eq!(config.iterations, 10);
        assert_eq!(config.objective_mode, ObjectiveMode::ConceptAware);
        assert_eq!(config.k_max, 12);
        assert_eq!(config.images_per_candidate, 1);
    }

    #[test]
    fn zero_iterations_rejected() {
        assert!(validate_config(&json!({"iterations": 0})).is_err());
        assert!(validate_config(&json!({"batch_size": 0})).is_err());
        assert!(validate_config(&json!({"retain_k": 0})).is_err());
    }

    #[test]
    fn retain_k_may_exceed_batch_size() {
        let config = validate_config(&json!({"batch_size": 5, "retain_k": 20})).unwrap();
        assert_eq!(config.batch_size, 5);
        assert_eq!(config.retain_k, 20);
    }

    #[test]
    fn unknown_config_key_rejected() {
        assert!(validate_config(&json!({"batchsize": 5})).is_err());
    }

    #[test]
    fn prompt_word_count_matches_tokens() {
        let p = Prompt::new("p0", "A  blue colored pizza").unwrap();
        assert_eq!(p.word_count, 4);
        assert!(Prompt::new("p1", "   ").is_err());
    }

    #[test]
    fn concept_set_rejects_commas_and_duplicates() {
        let err = ConceptSet::new(
            "p",
            vec![("a, b".to_string(), ConceptKind::Object)],
            12,
        );
        assert!(err.is_err());
        let err = ConceptSet::new(
            "p",
            vec![
                ("Blue Pizza".to_string(), ConceptKind::AttributeBinding),
                ("blue  pizza".to_string(), ConceptKind::Composite),
            ],
            12,
        );
        assert!(err.is_err());
    }

    #[test]
    fn pool_order_is_total_and_deterministic() {
        let a = candidate("a", "same text", 0.5);
        let b = candidate("b", "same text b", 0.5);
        let c = candidate("c", "other", 0.9);
        let pool = Pool::select_top_k(vec![a.clone(), b.clone(), c.clone()], 3);
        let ids: Vec<_> = pool.members().iter().map(|m| m.id.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b"]);

        // Permuting the input leaves the pool unchanged.
        let permuted = Pool::select_top_k(vec![b, c, a], 3);
        assert_eq!(pool, permuted);
    }

    #[test]
    fn pool_dedupes_case_folded_text_keeping_best() {
        let a = candidate("a", "A Blue Pizza", 0.9);
        let b = candidate("b", "a blue  pizza", 0.5);
        let pool = Pool::select_top_k(vec![b, a], 10);
        assert_eq!(pool.members().len(), 1);
        assert_eq!(pool.members()[0].id, "a");
    }

    #[test]
    fn top_k_insertion_extraction_idempotent() {
        let candidates: Vec<_> = (0..10)
            .map(|i| candidate(&format!("c{i}"), &format!("text {i}"), i as f64 / 10.0))
            .collect();
        let once = Pool::select_top_k(candidates.clone(), 4);
        let twice = Pool::select_top_k(once.members().to_vec(), 4);
        assert_eq!(once, twice);
    }

    #[test]
    fn scorecard_validates_alignment_and_arithmetic() {
        let card = ScoreCard {
            global: 0.3,
            per_concept: vec![0.1, 0.2, 0.3],
            aggregate: 0.3 + (0.1 + 0.2 + 0.3) / 3.0,
            objective_mode: ObjectiveMode::ConceptAware,
        };
        card.validate(3).unwrap();
        assert!(card.validate(2).is_err());

        let bad = ScoreCard {
            aggregate: 0.9,
            ..card
        };
        assert!(bad.validate(3).is_err());
    }

    #[test]
    fn parse_status_round_trips_as_string() {
        for status in [
            ParseStatus::Accepted,
            ParseStatus::ScoreFailed,
            ParseStatus::Rejected(RejectReason::NoNumericCounter),
            ParseStatus::Rejected(RejectReason::Empty),
            ParseStatus::Rejected(RejectReason::OverWordLimit),
            ParseStatus::Rejected(RejectReason::DuplicateOfPool),
            ParseStatus::Rejected(RejectReason::DuplicateInBatch),
        ] {
            let s = status.to_string();
            assert_eq!(s.parse::<ParseStatus>().unwrap(), status);
            let json = serde_json::to_string(&status).unwrap();
            assert_eq!(serde_json::from_str::<ParseStatus>(&json).unwrap(), status);
        }
    }
}
