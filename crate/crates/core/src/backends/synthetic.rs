//! Deterministic synthetic implementations of all backend roles, plus
//! the brute-force oracle used to verify optimizer convergence offline.
//!
//! The world maps text to an indicator vector over a small vocabulary of
//! concept phrases (token-boundary substring match). Images are the set
//! of phrases matched in the generating prompt, each independently
//! dropped with a PRNG keyed by (prompt, seed), so every output is a
//! pure function of (inputs, world seed).

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{
    ChatBackend, ChatMessage, ChatParams, EmbeddingBackend, ImageBackend, VisionBackend,
};
use crate::domain::fold_text;
use crate::error::{Error, Result};
use crate::extract::tokenize;
use crate::proposer::render_numbered;
use crate::scorer::cosine;
use crate::seeds::{derive_seed, hash64_str, sha256_hex};

/// Desk-scale stand-in for generator+scorer: a vocabulary of concept
/// phrases, a target subset, and the two corruption knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub vocabulary: Vec<String>,
    pub target: Vec<String>,
    #[serde(default)]
    pub dropout_p: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticWorld {
    pub fn validate(&self) -> Result<()> {
        if self.vocabulary.is_empty() {
            return Err(Error::InvalidConfig("world vocabulary is empty".into()));
        }
        if self.vocabulary.len() > 32 {
            return Err(Error::InvalidConfig(format!(
                "world vocabulary holds {} phrases, limit is 32",
                self.vocabulary.len()
            )));
        }
        for phrase in &self.target {
            if !self.vocabulary.contains(phrase) {
                return Err(Error::InvalidConfig(format!(
                    "target phrase {phrase:?} is not in the vocabulary"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidConfig("dropout_p must be in [0, 1)".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidConfig("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    /// Embedding dimension equals the vocabulary size.
    pub fn dimension(&self) -> usize {
        self.vocabulary.len()
    }

    /// Vocabulary indices whose phrase appears in `text` as a contiguous
    /// token run (token-boundary matched, case-folded).
    pub fn matched_indices(&self, text: &str) -> Vec<usize> {
        let tokens = tokenize(text);
        self.vocabulary
            .iter()
            .enumerate()
            .filter(|(_, phrase)| {
                let needle = tokenize(phrase);
                !needle.is_empty() && tokens.windows(needle.len()).any(|w| w == needle.as_slice())
            })
            .map(|(i, _)| i)
            .collect()
    }

    pub fn matched_phrases(&self, text: &str) -> Vec<String> {
        self.matched_indices(text)
            .into_iter()
            .map(|i| self.vocabulary[i].clone())
            .collect()
    }

    /// Raw (un-normalized) indicator vector over the vocabulary.
    pub fn indicator(&self, indices: &[usize]) -> Vec<f64> {
        let mut v = vec![0.0; self.vocabulary.len()];
        for &i in indices {
            v[i] = 1.0;
        }
        v
    }

    /// Phrases of `prompt` surviving dropout for one generation call.
    /// Keyed by hash(prompt, seed) and the world seed.
    pub fn survivors(&self, prompt: &str, seed: u64) -> Vec<usize> {
        let matched = self.matched_indices(prompt);
        if self.dropout_p == 0.0 {
            return matched;
        }
        let key = derive_seed(self.seed, &[hash64_str(prompt), seed]);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        matched
            .into_iter()
            .filter(|_| rng.gen::<f64>() >= self.dropout_p)
            .collect()
    }
}

/// Serialized payload stored as the "image" for synthetic generations.
/// Images are opaque bytes to the rest of the engine.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SyntheticImage {
    format: String,
    phrases: Vec<String>,
}

const SYNTHETIC_IMAGE_FORMAT: &str = "synthetic-image/1";

pub fn encode_image(phrases: &[String]) -> Vec<u8> {
    serde_json::to_vec(&SyntheticImage {
        format: SYNTHETIC_IMAGE_FORMAT.to_string(),
        phrases: phrases.to_vec(),
    })
    .expect("synthetic image serializes")
}

pub fn decode_image(bytes: &[u8]) -> Result<Vec<String>> {
    let image: SyntheticImage = serde_json::from_slice(bytes)
        .map_err(|e| Error::Data(format!("not a synthetic image: {e}")))?;
    if image.format != SYNTHETIC_IMAGE_FORMAT {
        return Err(Error::Data(format!(
            "unsupported synthetic image format: {}",
            image.format
        )));
    }
    Ok(image.phrases)
}

/// Deterministic image generator over a [`SyntheticWorld`].
pub struct SyntheticImageBackend {
    world: Arc<SyntheticWorld>,
    calls: AtomicUsize,
}

impl SyntheticImageBackend {
    pub fn new(world: Arc<SyntheticWorld>) -> Self {
        Self {
            world,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ImageBackend for SyntheticImageBackend {
    fn generate(&self, prompt: &str, seed: u64) -> Result<Vec<u8>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let survivors = self.world.survivors(prompt, seed);
        let phrases: Vec<String> = survivors
            .into_iter()
            .map(|i| self.world.vocabulary[i].clone())
            .collect();
        Ok(encode_image(&phrases))
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Indicator embeddings over the world vocabulary, with optional additive
/// noise on image embeddings keyed by the image content digest.
pub struct SyntheticEmbeddingBackend {
    world: Arc<SyntheticWorld>,
    text_items: AtomicUsize,
    image_items: AtomicUsize,
}

impl SyntheticEmbeddingBackend {
    pub fn new(world: Arc<SyntheticWorld>) -> Self {
        Self {
            world,
            text_items: AtomicUsize::new(0),
            image_items: AtomicUsize::new(0),
        }
    }

    /// Vectors served for text inputs so far.
    pub fn text_items(&self) -> usize {
        self.text_items.load(Ordering::SeqCst)
    }

    /// Vectors served for image inputs so far.
    pub fn image_items(&self) -> usize {
        self.image_items.load(Ordering::SeqCst)
    }
}

impl EmbeddingBackend for SyntheticEmbeddingBackend {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        self.text_items.fetch_add(texts.len(), Ordering::SeqCst);
        Ok(texts
            .iter()
            .map(|t| self.world.indicator(&self.world.matched_indices(t)))
            .collect())
    }

    fn embed_images(&self, images: &[Vec<u8>]) -> Result<Vec<Vec<f64>>> {
        self.image_items.fetch_add(images.len(), Ordering::SeqCst);
        images
            .iter()
            .map(|bytes| {
                let phrases = decode_image(bytes)?;
                let indices: Vec<usize> = phrases
                    .iter()
                    .map(|p| {
                        self.world
                            .vocabulary
                            .iter()
                            .position(|v| v == p)
                            .ok_or_else(|| {
                                Error::Data(format!("image phrase {p:?} not in vocabulary"))
                            })
                    })
                    .collect::<Result<_>>()?;
                let mut v = self.world.indicator(&indices);
                if self.world.noise_sigma > 0.0 {
                    let key =
                        derive_seed(self.world.seed, &[hash64_str(&sha256_hex(bytes))]);
                    let mut rng = ChaCha8Rng::seed_from_u64(key);
                    for x in &mut v {
                        *x += self.world.noise_sigma * gaussian(&mut rng);
                    }
                }
                Ok(v)
            })
            .collect()
    }

    fn dimension(&self) -> usize {
        self.world.dimension()
    }
}

const FILLER_PREFIXES: &[&str] = &[
    "",
    "a photo of",
    "a painting of",
    "a detailed scene of",
    "a bright scene of",
];
const FILLER_SUFFIXES: &[&str] = &[
    "",
    "rendered crisply",
    "sharply focused",
    "softly lit",
    "high quality render",
];

/// Scripted, feedback-aware chat backend. It answers the extraction
/// template with the vocabulary phrases found in the description, and
/// answers the rephrasing template with numbered vocabulary-phrase
/// combinations sampled by a seeded PRNG biased toward phrases whose
/// token-level scores in the rendered history are low.
pub struct SyntheticChat {
    world: Arc<SyntheticWorld>,
    seed: u64,
    calls: AtomicUsize,
}

impl SyntheticChat {
    pub fn new(world: Arc<SyntheticWorld>, seed: u64) -> Self {
        Self {
            world,
            seed,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn answer_extraction(&self, content: &str) -> String {
        let description = content
            .split("###image description:")
            .nth(1)
            .and_then(|rest| rest.split("###extracted tokens:").next())
            .unwrap_or("")
            .trim();
        self.world.matched_phrases(description).join(", ")
    }

    fn answer_refinement(&self, content: &str, seed: u64) -> Result<String> {
        let n_request = parse_request_count(content).unwrap_or(1);
        let history = parse_history_lines(content);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        // Best observed token-level score per vocabulary phrase, plus the
        // phrase set of the highest-overall rephrase for the blind
        // (global-only) fallback bias.
        let mut token_best: Vec<Option<f64>> = vec![None; self.world.vocabulary.len()];
        let mut best_entry: Option<(f64, Vec<usize>)> = None;
        let mut known: Vec<String> = Vec::new();
        for (text, overall, pairs) in &history {
            known.push(fold_text(text));
            for (name, score) in pairs {
                if let Some(i) = self.world.vocabulary.iter().position(|v| v == name) {
                    let slot = &mut token_best[i];
                    *slot = Some(slot.map_or(*score, |s: f64| s.max(*score)));
                }
            }
            let matched = self.world.matched_indices(text);
            if best_entry
                .as_ref()
                .map_or(true, |(best, _)| overall > best)
            {
                best_entry = Some((*overall, matched));
            }
        }
        let has_token_feedback = token_best.iter().any(|s| s.is_some());

        let mut lines: Vec<String> = Vec::new();
        let mut emitted: Vec<String> = Vec::new();
        for _ in 0..n_request {
            let mut found = None;
            for _attempt in 0..40 {
                let text = self.sample_text(&mut rng, &token_best, has_token_feedback, &best_entry);
                let folded = fold_text(&text);
                if known.contains(&folded) || emitted.contains(&folded) {
                    continue;
                }
                emitted.push(folded);
                found = Some(text);
                break;
            }
            if let Some(text) = found {
                lines.push(text);
            }
        }
        if lines.is_empty() {
            return Err(Error::backend("scripted proposer exhausted its text space"));
        }
        Ok(render_numbered(&lines))
    }

    fn sample_text(
        &self,
        rng: &mut ChaCha8Rng,
        token_best: &[Option<f64>],
        has_token_feedback: bool,
        best_entry: &Option<(f64, Vec<usize>)>,
    ) -> String {
        let m = self.world.vocabulary.len();
        let mut chosen: Vec<usize> = Vec::new();

        if has_token_feedback && rng.gen::<f64>() < 0.5 {
            // Re-state every scored concept: the straight play when the
            // feedback names what is missing.
            chosen = (0..m).filter(|&i| token_best[i].is_some()).collect();
        } else {
            for i in 0..m {
                let p = if has_token_feedback {
                    // Weak tokens are almost always restated; strong ones
                    // are knowingly preserved at a slightly lower rate.
                    match token_best[i] {
                        Some(score) => 0.95 - 0.25 * score.clamp(0.0, 1.0),
                        None => 0.12,
                    }
                } else if let Some((_, best_indices)) = best_entry {
                    // Without token feedback the rewriter imitates the
                    // best-overall rephrase but churns elements for
                    // diversity; it cannot protect any one of them.
                    if best_indices.contains(&i) {
                        0.65
                    } else {
                        0.35
                    }
                } else {
                    0.5
                };
                if rng.gen::<f64>() < p {
                    chosen.push(i);
                }
            }
        }
        if chosen.is_empty() {
            let fallback = (0..m)
                .min_by(|&a, &b| {
                    let sa = token_best[a].unwrap_or(2.0);
                    let sb = token_best[b].unwrap_or(2.0);
                    sa.total_cmp(&sb)
                })
                .unwrap_or(0);
            chosen.push(fallback);
        }

        // Shuffle phrase order for textual diversity.
        for i in (1..chosen.len()).rev() {
            let j = rng.gen_range(0..=i);
            chosen.swap(i, j);
        }
        let body = chosen
            .iter()
            .map(|&i| self.world.vocabulary[i].as_str())
            .collect::<Vec<_>>()
            .join(", ");
        let prefix = FILLER_PREFIXES[rng.gen_range(0..FILLER_PREFIXES.len())];
        let suffix = FILLER_SUFFIXES[rng.gen_range(0..FILLER_SUFFIXES.len())];
        let mut text = String::new();
        if !prefix.is_empty() {
            text.push_str(prefix);
            text.push(' ');
        }
        text.push_str(&body);
        if !suffix.is_empty() {
            text.push_str(", ");
            text.push_str(suffix);
        }
        text
    }
}

impl ChatBackend for SyntheticChat {
    fn complete(&self, messages: &[ChatMessage], params: &ChatParams) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let content = messages
            .last()
            .map(|m| m.content.as_str())
            .unwrap_or_default();
        if content.contains("###image description:") {
            return Ok(self.answer_extraction(content));
        }
        if content.contains("Current Description:") {
            let seed = params.seed.unwrap_or(self.seed);
            return self.answer_refinement(content, seed);
        }
        Err(Error::backend("synthetic chat got an unknown template"))
    }
}

fn parse_request_count(content: &str) -> Option<usize> {
    let rest = content.split("Generate ").nth(1)?;
    let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    digits.parse().ok()
}

fn parse_history_lines(content: &str) -> Vec<(String, f64, Vec<(String, f64)>)> {
    content.lines().filter_map(parse_history_line).collect()
}

fn parse_history_line(line: &str) -> Option<(String, f64, Vec<(String, f64)>)> {
    let rest = line.strip_prefix('"')?;
    let (text, rest) = rest.split_once("\" | overall: ")?;
    let (overall_str, tokens_str) = match rest.split_once(" | tokens: ") {
        Some((o, t)) => (o, Some(t)),
        None => (rest, None),
    };
    let overall: f64 = overall_str.trim().parse().ok()?;
    let mut pairs = Vec::new();
    if let Some(ts) = tokens_str {
        for part in ts.split(", ") {
            if let Some((name, score)) = part.rsplit_once('=') {
                if let Ok(s) = score.trim().parse::<f64>() {
                    pairs.push((name.to_string(), s));
                }
            }
        }
    }
    Some((text.to_string(), overall, pairs))
}

/// Captioner over synthetic images: the caption is the image's concept
/// list, which makes captioning-score arithmetic hand-checkable.
pub struct SyntheticCaptioner {
    world: Arc<SyntheticWorld>,
}

impl SyntheticCaptioner {
    pub fn new(world: Arc<SyntheticWorld>) -> Self {
        Self { world }
    }
}

impl VisionBackend for SyntheticCaptioner {
    fn describe(&self, image: &[u8], _instruction: &str) -> Result<String> {
        let phrases = decode_image(image)?;
        let _ = &self.world;
        Ok(phrases.join(", "))
    }
}

/// Judge over synthetic images: replies with the fraction of the
/// prompt's matched phrases present in the image, formatted "0.xx".
pub struct SyntheticJudge {
    world: Arc<SyntheticWorld>,
}

impl SyntheticJudge {
    pub fn new(world: Arc<SyntheticWorld>) -> Self {
        Self { world }
    }
}

impl VisionBackend for SyntheticJudge {
    fn describe(&self, image: &[u8], instruction: &str) -> Result<String> {
        let prompt = instruction
            .lines()
            .find_map(|l| l.strip_prefix("Prompt: "))
            .unwrap_or("");
        let wanted = self.world.matched_phrases(prompt);
        if wanted.is_empty() {
            return Ok("0.00".to_string());
        }
        let have = decode_image(image)?;
        let hit = wanted.iter().filter(|p| have.contains(p)).count();
        Ok(format!("{:.2}", hit as f64 / wanted.len() as f64))
    }
}

/// Brute-force optimum of the aggregate objective over all non-empty
/// vocabulary subsets, at zero noise and zero dropout. Candidate prompts
/// are the subset phrases joined by ", "; ties break toward the
/// lexicographically smaller prompt text.
pub fn synthetic_oracle_best(world: &SyntheticWorld) -> Result<(String, f64)> {
    world.validate()?;
    let m = world.vocabulary.len();
    if m > 16 {
        return Err(Error::InvalidInput(format!(
            "oracle enumeration bound is m <= 16, world has m = {m}"
        )));
    }
    if world.target.is_empty() {
        return Err(Error::InvalidInput("oracle needs a non-empty target".into()));
    }

    let prompt_text = world.target.join(", ");
    let prompt_vec = world.indicator(&world.matched_indices(&prompt_text));
    let concept_vecs: Vec<Vec<f64>> = world
        .target
        .iter()
        .map(|c| world.indicator(&world.matched_indices(c)))
        .collect();

    let mut best: Option<(String, f64)> = None;
    for bits in 1u32..(1 << m) {
        let subset: Vec<&str> = (0..m)
            .filter(|i| bits & (1 << i) != 0)
            .map(|i| world.vocabulary[i].as_str())
            .collect();
        let text = subset.join(", ");
        let image_vec = world.indicator(&world.matched_indices(&text));
        let global = cosine(&image_vec, &prompt_vec)?;
        let per_concept: Vec<f64> = concept_vecs
            .iter()
            .map(|c| cosine(&image_vec, c))
            .collect::<Result<_>>()?;
        let aggregate = global + per_concept.iter().sum::<f64>() / per_concept.len() as f64;
        let better = match &best {
            None => true,
            Some((best_text, best_agg)) => {
                aggregate > *best_agg || (aggregate == *best_agg && text < *best_text)
            }
        };
        if better {
            best = Some((text, aggregate));
        }
    }
    best.ok_or_else(|| Error::InvalidInput("empty enumeration".into()))
}
