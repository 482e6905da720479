//! conceptloop: concept-aware test-time prompt optimization for
//! text-to-image generation.
//!
//! The engine decomposes a prompt into concepts, scores candidate images
//! globally and per concept against a joint embedding space, and
//! iteratively asks an LLM to rewrite prompts guided by those
//! fine-grained scores. All models are external services; this crate
//! owns the optimization loop, the scoring math, the templates, the
//! evaluation harness, and a deterministic synthetic world for offline
//! verification.

pub mod backends;
pub mod domain;
pub mod error;
pub mod evalkit;
pub mod extract;
pub mod optimizer;
pub mod proposer;
pub mod replay;
pub mod scorer;
pub mod seeds;
pub mod store;

pub use domain::{
    Candidate, Concept, ConceptKind, ConceptSet, ExtractionMode, ImageRef, IterationRecord,
    ObjectiveMode, ParseStatus, Pool, Prompt, RejectReason, RunConfig, ScoreCard,
};
pub use error::{Error, Result};
