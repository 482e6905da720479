//! Fine-grained scoring: cosine similarity in the joint embedding space,
//! the global and per-concept scores, and the aggregate objective.
//!
//! Embeddings are L2-normalized on receipt, so cosine over cached vectors
//! reduces to a dot product and scoring the same content twice is
//! bitwise-reproducible.

use std::collections::HashMap;
use std::sync::Mutex;

use crate::backends::EmbeddingBackend;
use crate::domain::{ConceptSet, ObjectiveMode, Prompt, ScoreCard};
use crate::error::{Error, Result};

/// A vector in the joint embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl EmbeddingVector {
    /// Wraps raw backend output and L2-normalizes it. A zero-norm or
    /// empty vector signals a backend bug.
    pub fn from_raw(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::backend("embedding has dimension 0"));
        }
        let norm = l2_norm(&values);
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::backend("embedding has zero or non-finite norm"));
        }
        let values = values.iter().map(|v| v / norm).collect();
        Ok(Self {
            values,
            normalized: true,
        })
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }
}

fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cosine similarity dot(u,v)/(|u||v|). Errors on dimension mismatch and
/// on zero-norm input.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::InvalidInput(format!(
            "cosine dimension mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    if u.is_empty() {
        return Err(Error::InvalidInput("cosine over empty vectors".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = l2_norm(u);
    let nv = l2_norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::backend("cosine over zero-norm vector"));
    }
    Ok(dot / (nu * nv))
}

/// What kind of content an embedding was computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EmbedKind {
    Text,
    Image,
}

/// Content-addressed embedding cache. Values are deterministic per
/// backend, so concurrent insertion of the same key is harmless.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    inner: Mutex<HashMap<(EmbedKind, String), EmbeddingVector>>,
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn text_key(text: &str) -> String {
        crate::seeds::sha256_hex(text.as_bytes())
    }

    pub fn get(&self, kind: EmbedKind, digest: &str) -> Option<EmbeddingVector> {
        self.inner
            .lock()
            .expect("cache lock")
            .get(&(kind, digest.to_string()))
            .cloned()
    }

    pub fn insert(&self, kind: EmbedKind, digest: String, vector: EmbeddingVector) {
        self.inner
            .lock()
            .expect("cache lock")
            .insert((kind, digest), vector);
    }

    /// Fetches text embeddings through the cache, batching misses into a
    /// single backend call. Output order matches input order.
    pub fn texts(
        &self,
        texts: &[&str],
        backend: &dyn EmbeddingBackend,
    ) -> Result<Vec<EmbeddingVector>> {
        let keys: Vec<String> = texts.iter().map(|t| Self::text_key(t)).collect();
        let mut out: Vec<Option<EmbeddingVector>> = keys
            .iter()
            .map(|k| self.get(EmbedKind::Text, k))
            .collect();
        let miss_indices: Vec<usize> = out
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_none())
            .map(|(i, _)| i)
            .collect();
        if !miss_indices.is_empty() {
            let miss_texts: Vec<String> =
                miss_indices.iter().map(|&i| texts[i].to_string()).collect();
            let raw = backend.embed_texts(&miss_texts)?;
            if raw.len() != miss_texts.len() {
                return Err(Error::backend(format!(
                    "embedding batch returned {} vectors for {} inputs",
                    raw.len(),
                    miss_texts.len()
                )));
            }
            for (&i, values) in miss_indices.iter().zip(raw) {
                let vector = EmbeddingVector::from_raw(values)?;
                self.insert(EmbedKind::Text, keys[i].clone(), vector.clone());
                out[i] = Some(vector);
            }
        }
        Ok(out.into_iter().map(|v| v.expect("filled")).collect())
    }

    /// Fetches one image embedding through the cache, keyed by the image
    /// content digest.
    pub fn image(
        &self,
        digest: &str,
        bytes: &[u8],
        backend: &dyn EmbeddingBackend,
    ) -> Result<EmbeddingVector> {
        if let Some(hit) = self.get(EmbedKind::Image, digest) {
            return Ok(hit);
        }
        let raw = backend.embed_images(&[bytes.to_vec()])?;
        if raw.len() != 1 {
            return Err(Error::backend(format!(
                "image embedding batch returned {} vectors for 1 input",
                raw.len()
            )));
        }
        let vector = EmbeddingVector::from_raw(raw.into_iter().next().expect("len checked"))?;
        self.insert(EmbedKind::Image, digest.to_string(), vector.clone());
        Ok(vector)
    }

    /// Snapshot of all cached vectors, sorted by key, for persistence.
    pub fn snapshot(&self) -> Vec<(EmbedKind, String, Vec<f64>)> {
        let guard = self.inner.lock().expect("cache lock");
        let mut entries: Vec<_> = guard
            .iter()
            .map(|((kind, digest), v)| (*kind, digest.clone(), v.values.clone()))
            .collect();
        entries.sort_by(|a, b| (a.0 as u8, &a.1).cmp(&(b.0 as u8, &b.1)));
        entries
    }

    pub fn restore(&self, entries: Vec<(EmbedKind, String, Vec<f64>)>) {
        let mut guard = self.inner.lock().expect("cache lock");
        for (kind, digest, values) in entries {
            guard.insert(
                (kind, digest),
                EmbeddingVector {
                    values,
                    normalized: true,
                },
            );
        }
    }
}

/// Global score: cosine between the image embedding and the embedding of
/// the ORIGINAL prompt text, never a rewrite.
pub fn score_global(
    image_digest: &str,
    image_bytes: &[u8],
    original: &Prompt,
    backend: &dyn EmbeddingBackend,
    cache: &EmbeddingCache,
) -> Result<f64> {
    let image = cache.image(image_digest, image_bytes, backend)?;
    let text = cache.texts(&[original.text.as_str()], backend)?;
    cosine(&image.values, &text[0].values)
}

/// Per-concept scores, index-aligned with the concept set.
pub fn score_concepts(
    image_digest: &str,
    image_bytes: &[u8],
    concepts: &ConceptSet,
    backend: &dyn EmbeddingBackend,
    cache: &EmbeddingCache,
) -> Result<Vec<f64>> {
    let image = cache.image(image_digest, image_bytes, backend)?;
    let texts: Vec<&str> = concepts.texts().collect();
    let vectors = cache.texts(&texts, backend)?;
    vectors
        .iter()
        .map(|v| cosine(&image.values, &v.values))
        .collect()
}

/// Aggregate objective: the global score alone, or the global score plus
/// the arithmetic mean of the per-concept scores.
pub fn aggregate(global: f64, per_concept: &[f64], mode: ObjectiveMode) -> Result<f64> {
    match mode {
        ObjectiveMode::GlobalOnly => Ok(global),
        ObjectiveMode::ConceptAware => {
            if per_concept.is_empty() {
                return Err(Error::InvalidInput(
                    "concept_aware aggregate needs a non-empty score vector".into(),
                ));
            }
            let mean = per_concept.iter().sum::<f64>() / per_concept.len() as f64;
            Ok(global + mean)
        }
    }
}

/// Scores one candidate image against the original prompt and its
/// concept set, producing a complete [`ScoreCard`].
pub fn score_candidate(
    image_digest: &str,
    image_bytes: &[u8],
    original: &Prompt,
    concepts: &ConceptSet,
    backend: &dyn EmbeddingBackend,
    cache: &EmbeddingCache,
    mode: ObjectiveMode,
) -> Result<ScoreCard> {
    let global = score_global(image_digest, image_bytes, original, backend, cache)?;
    let per_concept = score_concepts(image_digest, image_bytes, concepts, backend, cache)?;
    let aggregate = aggregate(global, &per_concept, mode)?;
    Ok(ScoreCard {
        global,
        per_concept,
        aggregate,
        objective_mode: mode,
    })
}
