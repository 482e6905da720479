//! Benchmarks for the hot paths: syntactic extraction, cosine scoring,
//! candidate scoring through the cache, proposal parsing, pool
//! retention, and one full synthetic optimizer run.

use std::collections::HashSet;
use std::sync::Arc;

use criterion::{black_box, criterion_group, criterion_main, Criterion};

use conceptloop_core::backends::synthetic::SyntheticWorld;
use conceptloop_core::domain::{ConceptKind, ConceptSet, ExtractionMode, ObjectiveMode, RunConfig};
use conceptloop_core::optimizer::{self, select_top_k, Backends};
use conceptloop_core::proposer::{parse_candidates, render_numbered};
use conceptloop_core::scorer::{cosine, score_candidate, EmbeddingCache};
use conceptloop_core::seeds::sha256_hex;
use conceptloop_core::{Candidate, ImageRef, Prompt, ScoreCard};

fn bench_extract(c: &mut Criterion) {
    let prompt = Prompt::new(
        "p",
        "Two small wooden cats sit on a red mat next to the old green lamp with a blue book",
    )
    .unwrap();
    c.bench_function("extract_syntactic", |b| {
        b.iter(|| conceptloop_core::extract::extract_syntactic(black_box(&prompt), 12).unwrap())
    });
}

fn bench_cosine(c: &mut Criterion) {
    let u: Vec<f64> = (0..512).map(|i| (i as f64 * 0.37).sin()).collect();
    let v: Vec<f64> = (0..512).map(|i| (i as f64 * 0.11).cos()).collect();
    c.bench_function("cosine_512", |b| {
        b.iter(|| cosine(black_box(&u), black_box(&v)).unwrap())
    });
}

fn world() -> Arc<SyntheticWorld> {
    Arc::new(SyntheticWorld {
        vocabulary: (0..8).map(|i| format!("thing{i}")).collect(),
        target: (0..6).map(|i| format!("thing{i}")).collect(),
        dropout_p: 0.3,
        noise_sigma: 0.05,
        seed: 7,
    })
}

fn bench_score_candidate(c: &mut Criterion) {
    let world = world();
    let embed =
        conceptloop_core::backends::synthetic::SyntheticEmbeddingBackend::new(world.clone());
    let cache = EmbeddingCache::new();
    let prompt = Prompt::new("p", world.target.join(", ")).unwrap();
    let concepts = ConceptSet::new(
        "p",
        world
            .target
            .iter()
            .map(|t| (t.clone(), ConceptKind::Object))
            .collect(),
        12,
    )
    .unwrap();
    let bytes = conceptloop_core::backends::synthetic::encode_image(&world.target.clone());
    let digest = sha256_hex(&bytes);
    c.bench_function("score_candidate_cached", |b| {
        b.iter(|| {
            score_candidate(
                black_box(&digest),
                black_box(&bytes),
                &prompt,
                &concepts,
                &embed,
                &cache,
                ObjectiveMode::ConceptAware,
            )
            .unwrap()
        })
    });
}

fn bench_parse(c: &mut Criterion) {
    let texts: Vec<String> = (0..50)
        .map(|i| {
            format!(
                "a bright scene of thing{}, thing{}, softly lit take {i}",
                i % 8,
                (i + 3) % 8
            )
        })
        .collect();
    let reply = render_numbered(&texts);
    let existing = HashSet::new();
    c.bench_function("parse_candidates_50", |b| {
        b.iter(|| parse_candidates(black_box(&reply), &existing))
    });
}

fn bench_pool(c: &mut Criterion) {
    let candidates: Vec<Candidate> = (0..70)
        .map(|i| {
            let id = format!("c{i:03}");
            Candidate {
                id: id.clone(),
                rewrite_text: format!("text variant {i}"),
                image: ImageRef {
                    candidate_id: id,
                    content_digest: "0".repeat(64),
                    storage_path: "images/0.png".into(),
                    generator_seed: 0,
                    generator_meta: Default::default(),
                },
                scores: ScoreCard {
                    global: (i % 13) as f64 / 13.0,
                    per_concept: vec![],
                    aggregate: (i % 13) as f64 / 13.0,
                    objective_mode: ObjectiveMode::GlobalOnly,
                },
                born_iteration: 0,
                parent_ids: vec![],
            }
        })
        .collect();
    c.bench_function("select_top_20_of_70", |b| {
        b.iter(|| select_top_k(black_box(candidates.clone()), 20))
    });
}

fn bench_run(c: &mut Criterion) {
    let world = world();
    let prompt = Prompt::new("p", world.target.join(", ")).unwrap();
    let config = RunConfig {
        batch_size: 20,
        retain_k: 10,
        iterations: 1,
        rng_seed: 1,
        extraction: ExtractionMode::Llm,
        concurrency_limit: 2,
        ..RunConfig::default()
    };
    c.bench_function("synthetic_run_one_iteration_batch20", |b| {
        b.iter(|| {
            let dir = tempfile::tempdir().unwrap();
            let (backends, _) = Backends::synthetic(world.clone(), 1);
            optimizer::run(&config, &prompt, &backends, dir.path()).unwrap()
        })
    });
}

criterion_group!(
    benches,
    bench_extract,
    bench_cosine,
    bench_score_candidate,
    bench_parse,
    bench_pool,
    bench_run
);
criterion_main!(benches);
