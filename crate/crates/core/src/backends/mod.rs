//! Abstract interfaces for the three external model roles (chat,
//! embedding, image generation) plus the vision-chat role used by the
//! evaluation metrics, with HTTP implementations and deterministic
//! synthetic implementations used as oracles.

pub mod http;
pub mod synthetic;

use crate::error::Result;

/// One chat turn.
#[derive(Debug, Clone)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// Sampling parameters forwarded to chat backends.
#[derive(Debug, Clone)]
pub struct ChatParams {
    pub temperature: f64,
    pub max_tokens: usize,
    pub seed: Option<u64>,
}

/// Text completion service (prompt rewriting, concept extraction).
/// Implementations own their retry policy (2 retries, exponential
/// backoff) and surface transport status in errors.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, messages: &[ChatMessage], params: &ChatParams) -> Result<String>;
}

/// Joint text/image embedding service. Batch output order matches input
/// order and the dimension is fixed per instance.
pub trait EmbeddingBackend: Send + Sync {
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
    fn embed_images(&self, images: &[Vec<u8>]) -> Result<Vec<Vec<f64>>>;
    fn dimension(&self) -> usize;
}

/// Text-to-image service. Deterministic implementations return identical
/// bytes for identical (prompt, seed).
pub trait ImageBackend: Send + Sync {
    fn generate(&self, prompt: &str, seed: u64) -> Result<Vec<u8>>;
}

/// Chat-with-image service used by the captioning and judge metrics.
pub trait VisionBackend: Send + Sync {
    fn describe(&self, image: &[u8], instruction: &str) -> Result<String>;
}

/// Environment variable carrying the chat credential; the embed and
/// image variables fall back to it when unset.
pub const API_KEY_ENV: &str = "CONCEPTLOOP_API_KEY";
pub const EMBED_KEY_ENV: &str = "CONCEPTLOOP_EMBED_KEY";
pub const IMAGE_KEY_ENV: &str = "CONCEPTLOOP_IMAGE_KEY";

/// Resolves a credential for one backend role from the environment.
pub fn api_key_from_env(role_env: &str) -> Option<String> {
    std::env::var(role_env)
        .ok()
        .filter(|v| !v.is_empty())
        .or_else(|| {
            std::env::var(API_KEY_ENV)
                .ok()
                .filter(|v| !v.is_empty())
        })
}
