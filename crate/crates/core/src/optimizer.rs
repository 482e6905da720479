//! The refinement loop: seed, propose, generate, score, retain, feed
//! back, stop — with a deterministic on-disk trace enabling bit-exact
//! replay and resume.
//!
//! All stochastic inputs (proposal sampling, generation seeds) are
//! derived from (rng_seed, iteration, slot), never from evolving RNG
//! state, so a resumed run continues exactly where an uninterrupted one
//! would have been.

use std::collections::HashSet;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use crate::backends::{ChatBackend, EmbeddingBackend, ImageBackend};
use crate::domain::{
    Candidate, ConceptSet, ExtractionMode, ImageRef, IterationRecord, ObjectiveMode, ParseStatus,
    Pool, Prompt, RunConfig,
};
use crate::error::{Error, Result};
use crate::extract;
use crate::proposer::{self, HistoryEntry};
use crate::scorer::{self, EmbeddingCache};
use crate::seeds::{derive_seed, sha256_hex};
use crate::store::{ConceptsFile, RunStore};

const PROPOSAL_SALT: u64 = 0x70726f70; // "prop"
const IMAGE_SALT: u64 = 0x696d6167; // "imag"

/// The three model services a run talks to.
pub struct Backends {
    pub chat: Arc<dyn ChatBackend>,
    pub embed: Arc<dyn EmbeddingBackend>,
    pub image: Arc<dyn ImageBackend>,
    /// Recorded into image metadata.
    pub label: String,
    /// Deterministic backends record wall_time_ms as 0 so identical runs
    /// produce byte-identical traces.
    pub deterministic: bool,
}

/// Outcome of a run: the best candidate, the final pool, and the trace.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub best: Candidate,
    pub pool: Pool,
    pub trace: Vec<IterationRecord>,
}

/// Concrete handles on a synthetic backend set, kept alongside the
/// type-erased [`Backends`] so tests can read call counters.
pub struct SyntheticHandles {
    pub chat: Arc<crate::backends::synthetic::SyntheticChat>,
    pub embed: Arc<crate::backends::synthetic::SyntheticEmbeddingBackend>,
    pub image: Arc<crate::backends::synthetic::SyntheticImageBackend>,
}

impl Backends {
    /// Builds a fully deterministic backend set over one synthetic world.
    pub fn synthetic(
        world: Arc<crate::backends::synthetic::SyntheticWorld>,
        seed: u64,
    ) -> (Self, SyntheticHandles) {
        let chat = Arc::new(crate::backends::synthetic::SyntheticChat::new(
            world.clone(),
            seed,
        ));
        let embed = Arc::new(crate::backends::synthetic::SyntheticEmbeddingBackend::new(
            world.clone(),
        ));
        let image = Arc::new(crate::backends::synthetic::SyntheticImageBackend::new(world));
        let backends = Backends {
            chat: chat.clone(),
            embed: embed.clone(),
            image: image.clone(),
            label: "synthetic".to_string(),
            deterministic: true,
        };
        (backends, SyntheticHandles { chat, embed, image })
    }
}

/// Top-k retention under the domain total order.
pub fn select_top_k(candidates: Vec<Candidate>, k: usize) -> Pool {
    Pool::select_top_k(candidates, k)
}

/// True iff the fixed iteration budget is spent, or (when
/// early_stop_patience is set) the best aggregate improved by less than
/// 1e-9 for that many consecutive iterations.
pub fn should_stop(trace: &[IterationRecord], config: &RunConfig) -> bool {
    let Some(last) = trace.last() else {
        return false;
    };
    if last.iteration >= config.iterations {
        return true;
    }
    if let Some(patience) = config.early_stop_patience {
        let mut flats = 0u32;
        for pair in trace.windows(2).rev() {
            if pair[1].best_aggregate - pair[0].best_aggregate < 1e-9 {
                flats += 1;
            } else {
                break;
            }
        }
        if flats >= patience {
            return true;
        }
    }
    false
}

/// Runs the full loop into `run_dir`.
pub fn run(
    config: &RunConfig,
    prompt: &Prompt,
    backends: &Backends,
    run_dir: &Path,
) -> Result<RunResult> {
    run_until(config, prompt, backends, run_dir, None)
}

/// Runs the loop but halts after `stop_after` refinement iterations when
/// set, leaving a resumable run directory behind (crash stand-in for
/// resume tests).
pub fn run_until(
    config: &RunConfig,
    prompt: &Prompt,
    backends: &Backends,
    run_dir: &Path,
    stop_after: Option<u32>,
) -> Result<RunResult> {
    config.validate()?;
    let store = RunStore::create(run_dir)?;
    store.write_config(config)?;

    let (concept_set, report) = match config.extraction {
        ExtractionMode::Syntactic => extract::extract_syntactic(prompt, config.k_max)?,
        ExtractionMode::Llm => extract::extract_llm(prompt, backends.chat.as_ref(), config.k_max)?,
    };
    store.write_concepts(&ConceptsFile {
        schema: 1,
        prompt: prompt.clone(),
        concept_set: concept_set.clone(),
        report,
    })?;

    let cache = EmbeddingCache::new();
    let mut state = LoopState {
        config,
        prompt,
        concepts: &concept_set,
        backends,
        store: &store,
        cache,
        pool: Pool::empty(config.retain_k),
        trace: Vec::new(),
    };

    state.seed_pool()?;
    state.run_loop(stop_after)?;
    state.finish()
}

/// Reconstructs a run from its directory and continues it to completion.
/// With deterministic backends the final trace equals the uninterrupted
/// run's trace.
pub fn resume(run_dir: &Path, backends: &Backends) -> Result<RunResult> {
    let store = RunStore::open(run_dir)?;
    let config = store.read_config()?;
    config.validate()?;
    let concepts_file = store.read_concepts()?;

    let (trace, dropped_tail) = store.read_trace_repairing()?;
    if dropped_tail {
        log::warn!("resume dropped a corrupt trailing trace line");
    }
    let last = trace
        .last()
        .ok_or_else(|| Error::Data("run has no usable trace records to resume from".into()))?;

    let mut members = Vec::with_capacity(last.retained_ids.len());
    for id in &last.retained_ids {
        let candidate = store.read_candidate(id)?;
        // Missing or tampered image files for retained candidates are fatal.
        store.read_image(&candidate.image.content_digest)?;
        members.push(candidate);
    }
    let pool = select_top_k(members, config.retain_k);

    let cache = EmbeddingCache::new();
    store.load_cache(&cache)?;

    let mut state = LoopState {
        config: &config,
        prompt: &concepts_file.prompt,
        concepts: &concepts_file.concept_set,
        backends,
        store: &store,
        cache,
        pool,
        trace,
    };
    state.run_loop(None)?;
    state.finish()
}

struct LoopState<'a> {
    config: &'a RunConfig,
    prompt: &'a Prompt,
    concepts: &'a ConceptSet,
    backends: &'a Backends,
    store: &'a RunStore,
    cache: EmbeddingCache,
    pool: Pool,
    trace: Vec<IterationRecord>,
}

/// One generation+scoring job: (candidate slot, rewrite text, image seed).
struct Job {
    slot: usize,
    text: String,
    image_seed: u64,
    id: String,
    parents: Vec<String>,
}

impl LoopState<'_> {
    /// Iteration 0: the original prompt itself is generated and scored,
    /// seeding the pool (and measuring the raw-generator baseline). A
    /// generation whose image cannot be scored is retried with fresh
    /// derived seeds: the run cannot proceed without a seeded pool.
    fn seed_pool(&mut self) -> Result<()> {
        let started = Instant::now();
        let text = vec![self.prompt.text.clone()];
        let mut scored: Vec<Candidate> = Vec::new();
        for attempt in 0..8 {
            let jobs = self.make_jobs_attempt(0, &text, &[], attempt);
            let outcomes = self.execute_jobs(0, &jobs);
            scored = outcomes.into_iter().flatten().collect();
            if !scored.is_empty() {
                break;
            }
        }
        if scored.is_empty() {
            return Err(Error::backend(
                "seeding failed: the original prompt could not be generated and scored",
            ));
        }
        for candidate in &scored {
            self.store.write_candidate(candidate)?;
        }
        let scored_ids: Vec<String> = scored.iter().map(|c| c.id.clone()).collect();
        self.pool = select_top_k(scored, self.config.retain_k);
        let record = IterationRecord {
            iteration: 0,
            proposed: vec![(self.prompt.text.clone(), ParseStatus::Accepted)],
            scored_candidate_ids: scored_ids,
            retained_ids: self.pool.members().iter().map(|c| c.id.clone()).collect(),
            best_aggregate: self.pool.best().expect("seeded pool").scores.aggregate,
            wall_time_ms: self.elapsed_ms(started),
        };
        self.store.append_trace(&record)?;
        self.store.write_cache(&self.cache)?;
        self.trace.push(record);
        Ok(())
    }

    fn run_loop(&mut self, stop_after: Option<u32>) -> Result<()> {
        while !should_stop(&self.trace, self.config) {
            let next = self.trace.last().map(|r| r.iteration + 1).unwrap_or(1);
            if let Some(limit) = stop_after {
                if next > limit {
                    break;
                }
            }
            self.iterate(next)?;
        }
        Ok(())
    }

    fn iterate(&mut self, iteration: u32) -> Result<()> {
        let started = Instant::now();
        let history = self.history();
        let existing = self.pool.folded_texts();

        let (accepted, mut rejected) = self.propose_batch(iteration, 0, &history, &existing)?;
        let (accepted, second_rejected) = if accepted.is_empty() {
            // Zero parseable candidates: re-request once, then proceed
            // with whatever the pool already holds.
            let (retry_accepted, retry_rejected) =
                self.propose_batch(iteration, 1, &history, &existing)?;
            (retry_accepted, Some(retry_rejected))
        } else {
            (accepted, None)
        };
        if let Some(extra) = second_rejected {
            rejected.extend(extra);
        }

        let parents: Vec<String> = self.pool.members().iter().map(|c| c.id.clone()).collect();
        let jobs = self.make_jobs(iteration, &accepted, &parents);
        let outcomes = self.execute_jobs(iteration, &jobs);

        let mut scored: Vec<Candidate> = Vec::new();
        let mut text_scored = vec![false; accepted.len()];
        for (job, outcome) in jobs.iter().zip(outcomes) {
            if let Some(candidate) = outcome {
                text_scored[job.slot / self.config.images_per_candidate] = true;
                scored.push(candidate);
            }
        }
        for candidate in &scored {
            self.store.write_candidate(candidate)?;
        }
        let scored_ids: Vec<String> = scored.iter().map(|c| c.id.clone()).collect();

        let mut merged = self.pool.members().to_vec();
        merged.extend(scored);
        self.pool = select_top_k(merged, self.config.retain_k);

        let mut proposed: Vec<(String, ParseStatus)> = accepted
            .iter()
            .zip(&text_scored)
            .map(|(text, ok)| {
                let status = if *ok {
                    ParseStatus::Accepted
                } else {
                    ParseStatus::ScoreFailed
                };
                (text.clone(), status)
            })
            .collect();
        proposed.extend(
            rejected
                .into_iter()
                .map(|(line, reason)| (line, ParseStatus::Rejected(reason))),
        );

        let record = IterationRecord {
            iteration,
            proposed,
            scored_candidate_ids: scored_ids,
            retained_ids: self.pool.members().iter().map(|c| c.id.clone()).collect(),
            best_aggregate: self.pool.best().expect("pool never empties").scores.aggregate,
            wall_time_ms: self.elapsed_ms(started),
        };
        self.store.append_trace(&record)?;
        self.store.write_cache(&self.cache)?;
        self.trace.push(record);
        Ok(())
    }

    fn history(&self) -> Vec<HistoryEntry> {
        self.pool
            .members()
            .iter()
            .map(|member| {
                let per_concept_pairs = match self.config.objective_mode {
                    // The global-only baseline feeds back no token-level
                    // signal, matching what it optimizes.
                    ObjectiveMode::GlobalOnly => Vec::new(),
                    ObjectiveMode::ConceptAware => self
                        .concepts
                        .texts()
                        .map(str::to_string)
                        .zip(member.scores.per_concept.iter().copied())
                        .collect(),
                };
                HistoryEntry {
                    rewrite_text: member.rewrite_text.clone(),
                    global: member.scores.global,
                    per_concept_pairs,
                }
            })
            .collect()
    }

    fn propose_batch(
        &self,
        iteration: u32,
        attempt: u64,
        history: &[HistoryEntry],
        existing: &HashSet<String>,
    ) -> Result<(Vec<String>, Vec<(String, crate::domain::RejectReason)>)> {
        let seed = derive_seed(
            self.config.rng_seed,
            &[u64::from(iteration), PROPOSAL_SALT, attempt],
        );
        proposer::propose(
            self.backends.chat.as_ref(),
            self.prompt,
            self.concepts,
            history,
            self.config.batch_size,
            existing,
            1.0,
            Some(seed),
        )
    }

    fn make_jobs(&self, iteration: u32, texts: &[String], parents: &[String]) -> Vec<Job> {
        self.make_jobs_attempt(iteration, texts, parents, 0)
    }

    fn make_jobs_attempt(
        &self,
        iteration: u32,
        texts: &[String],
        parents: &[String],
        attempt: u64,
    ) -> Vec<Job> {
        let ipc = self.config.images_per_candidate;
        let mut jobs = Vec::with_capacity(texts.len() * ipc);
        for (ci, text) in texts.iter().enumerate() {
            for ii in 0..ipc {
                let slot = ci * ipc + ii;
                let image_seed = derive_seed(
                    self.config.rng_seed,
                    &[u64::from(iteration), IMAGE_SALT, slot as u64, attempt],
                );
                let id = sha256_hex(
                    format!(
                        "candidate:{}:{}:{}:{}",
                        self.config.rng_seed, iteration, slot, text
                    )
                    .as_bytes(),
                )[..16]
                    .to_string();
                jobs.push(Job {
                    slot,
                    text: text.clone(),
                    image_seed,
                    id,
                    parents: parents.to_vec(),
                });
            }
        }
        jobs
    }

    /// Generates and scores every job, fanning out up to
    /// concurrency_limit workers. Results come back in job order, never
    /// completion order. A failed job degrades the iteration, not the run.
    fn execute_jobs(&self, iteration: u32, jobs: &[Job]) -> Vec<Option<Candidate>> {
        let n = jobs.len();
        if n == 0 {
            return Vec::new();
        }
        let results: Vec<Mutex<Option<Option<Candidate>>>> =
            (0..n).map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.config.concurrency_limit.min(n).max(1);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= n {
                        break;
                    }
                    let outcome = match self.score_job(iteration, &jobs[i]) {
                        Ok(candidate) => Some(candidate),
                        Err(e) => {
                            log::warn!(
                                "iteration {iteration}: candidate {:?} failed: {e}",
                                jobs[i].text
                            );
                            None
                        }
                    };
                    *results[i].lock().expect("result slot") = Some(outcome);
                });
            }
        });
        results
            .into_iter()
            .map(|slot| slot.into_inner().expect("poisoned slot").expect("slot filled"))
            .collect()
    }

    fn score_job(&self, iteration: u32, job: &Job) -> Result<Candidate> {
        let bytes = self.backends.image.generate(&job.text, job.image_seed)?;
        let digest = sha256_hex(&bytes);
        self.store.write_image(&digest, &bytes)?;
        let scores = scorer::score_candidate(
            &digest,
            &bytes,
            self.prompt,
            self.concepts,
            self.backends.embed.as_ref(),
            &self.cache,
            self.config.objective_mode,
        )?;
        let mut meta = std::collections::BTreeMap::new();
        meta.insert("generator".to_string(), self.backends.label.clone());
        Ok(Candidate {
            id: job.id.clone(),
            rewrite_text: job.text.clone(),
            image: ImageRef {
                candidate_id: job.id.clone(),
                content_digest: digest.clone(),
                storage_path: RunStore::image_rel_path(&digest),
                generator_seed: job.image_seed,
                generator_meta: meta,
            },
            scores,
            born_iteration: iteration,
            parent_ids: job.parents.clone(),
        })
    }

    fn elapsed_ms(&self, started: Instant) -> u64 {
        if self.backends.deterministic {
            0
        } else {
            started.elapsed().as_millis() as u64
        }
    }

    fn finish(self) -> Result<RunResult> {
        let best = self
            .pool
            .best()
            .cloned()
            .ok_or_else(|| Error::Data("run finished with an empty pool".into()))?;
        Ok(RunResult {
            best,
            pool: self.pool,
            trace: self.trace,
        })
    }
}
