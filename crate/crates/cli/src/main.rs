//! conceptloop command line: concept extraction, optimization runs,
//! evaluation reports, the synthetic brute-force oracle, and offline
//! replay of stored runs.
//!
//! Exit codes: 0 success, 1 usage/configuration error, 2 backend
//! failure, 3 data error. Commands write only under their --out / --run
//! directories.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use conceptloop_core::backends::http::{HttpChat, HttpEmbedding, HttpImage, HttpVision};
use conceptloop_core::backends::synthetic::{
    synthetic_oracle_best, SyntheticCaptioner, SyntheticJudge, SyntheticWorld,
};
use conceptloop_core::backends::{api_key_from_env, API_KEY_ENV, EMBED_KEY_ENV, IMAGE_KEY_ENV};
use conceptloop_core::domain::{fold_text, validate_config, ExtractionMode, ObjectiveMode};
use conceptloop_core::evalkit::{self, BenchmarkSource, EvalBackends, EvalSample, MetricKind};
use conceptloop_core::optimizer::{self, Backends};
use conceptloop_core::store::RunStore;
use conceptloop_core::{extract, replay, Error, Prompt, Result, RunConfig};

#[derive(Parser)]
#[command(
    name = "conceptloop",
    version,
    about = "Concept-aware test-time prompt optimization for text-to-image generation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract a prompt's concept set and print it as JSON.
    Extract(ExtractArgs),
    /// Run the optimization loop into a run directory.
    Optimize(OptimizeArgs),
    /// Evaluate finished runs and write report files.
    Eval(EvalArgs),
    /// Print the brute-force optimum of a synthetic world.
    Oracle(OracleArgs),
    /// Recompute a stored run's scores from its images and cache.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct ExtractArgs {
    /// The prompt text.
    prompt: String,
    /// Extraction path: syntactic | llm.
    #[arg(long, default_value = "syntactic")]
    mode: String,
    #[arg(long, default_value_t = 12)]
    k_max: usize,
    /// Chat endpoint base URL (llm mode).
    #[arg(long)]
    chat_endpoint: Option<String>,
    #[arg(long, default_value = "")]
    chat_model: String,
}

#[derive(Args)]
struct OptimizeArgs {
    /// The prompt to optimize.
    #[arg(long)]
    prompt: String,
    /// JSON config file; keys match RunConfig fields. Flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Objective: global | concept.
    #[arg(long)]
    objective: Option<String>,
    /// Use the deterministic synthetic backends.
    #[arg(long)]
    synthetic: bool,
    /// Synthetic world JSON (defaults to a world built from the prompt).
    #[arg(long)]
    world: Option<PathBuf>,
    /// RNG seed threaded through every stochastic component.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<u32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    retain_k: Option<usize>,
    /// Concept extraction path: syntactic | llm.
    #[arg(long)]
    extraction: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directories to evaluate.
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    /// Benchmark CSV (`prompt,category`) used to categorize runs.
    #[arg(long)]
    benchmark: Option<PathBuf>,
    /// Benchmark source: drawbench | compbench | custom.
    #[arg(long, default_value = "custom")]
    benchmark_source: String,
    /// Comma-separated metrics: clip,captioning,judge,vqa_judge.
    #[arg(long)]
    metrics: String,
    /// Directory for report.json and report.csv.
    #[arg(long)]
    out: PathBuf,
    /// Evaluate with synthetic backends (worlds from the run dirs).
    #[arg(long)]
    synthetic: bool,
    /// Synthetic world JSON overriding the run dirs' worlds.
    #[arg(long)]
    world: Option<PathBuf>,
    /// Human votes CSV (`prompt,vote1,vote2,vote3`) for win rates.
    #[arg(long)]
    judgments: Option<PathBuf>,
    #[arg(long)]
    embed_endpoint: Option<String>,
    #[arg(long, default_value = "")]
    embed_model: String,
    #[arg(long)]
    vision_endpoint: Option<String>,
    #[arg(long, default_value = "")]
    vision_model: String,
}

#[derive(Args)]
struct OracleArgs {
    /// Synthetic world JSON file.
    #[arg(long)]
    world: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    /// Run directory to replay.
    #[arg(long)]
    run: PathBuf,
    /// Re-rank under this objective instead: global | concept.
    #[arg(long)]
    objective: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Extract(args) => cmd_extract(args),
        Command::Optimize(args) => cmd_optimize(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Oracle(args) => cmd_oracle(args),
        Command::Replay(args) => cmd_replay(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn parse_objective(s: &str) -> Result<ObjectiveMode> {
    match s {
        "global" => Ok(ObjectiveMode::GlobalOnly),
        "concept" => Ok(ObjectiveMode::ConceptAware),
        other => Err(Error::InvalidInput(format!(
            "unknown objective {other:?} (expected global | concept)"
        ))),
    }
}

fn parse_extraction(s: &str) -> Result<ExtractionMode> {
    match s {
        "syntactic" => Ok(ExtractionMode::Syntactic),
        "llm" => Ok(ExtractionMode::Llm),
        other => Err(Error::InvalidInput(format!(
            "unknown extraction mode {other:?} (expected syntactic | llm)"
        ))),
    }
}

fn prompt_from_text(text: &str) -> Result<Prompt> {
    let id = format!(
        "p-{}",
        &conceptloop_core::seeds::sha256_hex(text.as_bytes())[..12]
    );
    Prompt::new(id, text)
}

fn read_world(path: &Path) -> Result<SyntheticWorld> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read world {}: {e}", path.display())))?;
    let world: SyntheticWorld = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("bad world file {}: {e}", path.display())))?;
    world.validate()?;
    Ok(world)
}

/// Default synthetic world for a prompt: each comma-separated segment
/// becomes a vocabulary phrase and the target is all of them.
fn world_from_prompt(text: &str, seed: u64) -> Result<SyntheticWorld> {
    let mut vocabulary = Vec::new();
    let mut seen = HashSet::new();
    for segment in text.split(',') {
        let phrase = segment.trim().to_lowercase();
        if !phrase.is_empty() && seen.insert(phrase.clone()) {
            vocabulary.push(phrase);
        }
    }
    let world = SyntheticWorld {
        target: vocabulary.clone(),
        vocabulary,
        dropout_p: 0.3,
        noise_sigma: 0.0,
        seed,
    };
    world.validate()?;
    Ok(world)
}

fn cmd_extract(args: ExtractArgs) -> Result<()> {
    let prompt = prompt_from_text(&args.prompt)?;
    let (set, report) = match args.mode.as_str() {
        "syntactic" => extract::extract_syntactic(&prompt, args.k_max)?,
        "llm" => {
            let endpoint = args.chat_endpoint.as_deref().ok_or_else(|| {
                Error::InvalidConfig("llm extraction needs --chat-endpoint".into())
            })?;
            let chat = HttpChat::new(endpoint, &args.chat_model, api_key_from_env(API_KEY_ENV));
            extract::extract_llm(&prompt, &chat, args.k_max)?
        }
        other => {
            return Err(Error::InvalidInput(format!(
                "unknown extraction mode {other:?} (expected syntactic | llm)"
            )))
        }
    };
    let out = serde_json::json!({ "concept_set": set, "report": report });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn load_config(args: &OptimizeArgs) -> Result<RunConfig> {
    let raw = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Data(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::InvalidConfig(format!("bad config file: {e}")))?
        }
        None => serde_json::Value::Object(Default::default()),
    };
    let mut config = validate_config(&raw)?;
    if let Some(seed) = args.seed {
        config.rng_seed = seed;
    }
    if let Some(iterations) = args.iterations {
        config.iterations = iterations;
    }
    if let Some(batch) = args.batch_size {
        config.batch_size = batch;
    }
    if let Some(retain) = args.retain_k {
        config.retain_k = retain;
    }
    if let Some(objective) = &args.objective {
        config.objective_mode = parse_objective(objective)?;
    }
    match &args.extraction {
        Some(mode) => config.extraction = parse_extraction(mode)?,
        // Synthetic prompts are comma-joined phrases the whitespace
        // grammar cannot segment; the synthetic chat answers the
        // extraction template deterministically instead.
        None if args.synthetic => config.extraction = ExtractionMode::Llm,
        None => {}
    }
    config.validate()?;
    Ok(config)
}

fn http_backends(config: &RunConfig) -> Result<Backends> {
    let b = &config.backends;
    let chat_endpoint = b
        .chat_endpoint
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("config.backends.chat_endpoint is not set".into()))?;
    let embed_endpoint = b
        .embed_endpoint
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("config.backends.embed_endpoint is not set".into()))?;
    let image_endpoint = b
        .image_endpoint
        .as_deref()
        .ok_or_else(|| Error::InvalidConfig("config.backends.image_endpoint is not set".into()))?;
    Ok(Backends {
        chat: Arc::new(HttpChat::new(
            chat_endpoint,
            &b.chat_model,
            api_key_from_env(API_KEY_ENV),
        )),
        embed: Arc::new(HttpEmbedding::new(
            embed_endpoint,
            &b.embed_model,
            api_key_from_env(EMBED_KEY_ENV),
        )),
        image: Arc::new(HttpImage::new(
            image_endpoint,
            &b.image_model,
            api_key_from_env(IMAGE_KEY_ENV),
        )),
        label: "http".to_string(),
        deterministic: false,
    })
}

fn cmd_optimize(args: OptimizeArgs) -> Result<()> {
    let config = load_config(&args)?;
    let prompt = prompt_from_text(&args.prompt)?;

    let backends = if args.synthetic {
        let world = match &args.world {
            Some(path) => read_world(path)?,
            None => world_from_prompt(&prompt.text, config.rng_seed)?,
        };
        let store = RunStore::create(&args.out)?;
        store.write_world(&world)?;
        let (backends, _) = Backends::synthetic(Arc::new(world), config.rng_seed);
        backends
    } else {
        http_backends(&config)?
    };

    let result = optimizer::run(&config, &prompt, &backends, &args.out)?;
    println!("best rewrite: {}", result.best.rewrite_text);
    println!("best aggregate: {}", result.best.scores.aggregate);
    println!(
        "best image: {}",
        args.out.join(&result.best.image.storage_path).display()
    );
    Ok(())
}

fn cmd_oracle(args: OracleArgs) -> Result<()> {
    let world = read_world(&args.world)?;
    let (best_prompt, best_aggregate) = synthetic_oracle_best(&world)?;
    let out = serde_json::json!({
        "best_prompt": best_prompt,
        "best_aggregate": best_aggregate,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn cmd_replay(args: ReplayArgs) -> Result<()> {
    let objective = args.objective.as_deref().map(parse_objective).transpose()?;
    let outcome = replay::replay(&args.run, objective)?;
    println!("verified candidates: {}", outcome.verified_candidates);
    if let Some(path) = &outcome.written {
        println!("re-ranked trace: {}", path.display());
    } else if outcome.trace_matches {
        println!("trace reproduced: yes");
    } else {
        return Err(Error::Data(
            "replay rebuilt a different trace than the stored one".into(),
        ));
    }
    println!("best rewrite: {}", outcome.best.rewrite_text);
    println!(
        "best aggregate ({}): {}",
        outcome.mode, outcome.best.scores.aggregate
    );
    Ok(())
}

/// Loads a run's original prompt text and its best candidate's image.
fn load_run_sample(run_dir: &Path) -> Result<(String, String, Vec<u8>)> {
    let store = RunStore::open(run_dir)?;
    let concepts = store.read_concepts()?;
    let (trace, _) = store.read_trace()?;
    let last = trace
        .last()
        .ok_or_else(|| Error::Data(format!("{} has no trace", run_dir.display())))?;
    let best_id = last
        .retained_ids
        .first()
        .ok_or_else(|| Error::Data(format!("{} has an empty pool", run_dir.display())))?;
    let candidate = store.read_candidate(best_id)?;
    let bytes = store.read_image(&candidate.image.content_digest)?;
    Ok((concepts.prompt.text, candidate.image.content_digest, bytes))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let metrics: Vec<MetricKind> = args
        .metrics
        .split(',')
        .map(str::trim)
        .filter(|m| !m.is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if metrics.is_empty() {
        return Err(Error::InvalidInput("no metrics selected".into()));
    }

    let benchmark = match &args.benchmark {
        Some(path) => {
            let source: BenchmarkSource = args.benchmark_source.parse()?;
            let (prompts, warnings) = evalkit::load_benchmark(path, source)?;
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            Some(prompts)
        }
        None => None,
    };

    let mut samples = Vec::new();
    for run_dir in &args.runs {
        let (prompt_text, digest, bytes) = load_run_sample(run_dir)?;
        let category = benchmark
            .as_ref()
            .and_then(|prompts| {
                prompts
                    .iter()
                    .find(|p| fold_text(&p.text) == fold_text(&prompt_text))
                    .map(|p| p.category.clone())
            })
            .unwrap_or_else(|| "uncategorized".to_string());
        samples.push(EvalSample {
            prompt: prompt_text,
            category,
            image_digest: digest,
            image_bytes: bytes,
        });
    }

    let backends = if args.synthetic {
        let world = match &args.world {
            Some(path) => read_world(path)?,
            None => RunStore::open(&args.runs[0])?
                .read_world()?
                .ok_or_else(|| {
                    Error::InvalidConfig(
                        "--synthetic eval needs --world or a run with world.json".into(),
                    )
                })?,
        };
        let world = Arc::new(world);
        EvalBackends {
            embed: Arc::new(
                conceptloop_core::backends::synthetic::SyntheticEmbeddingBackend::new(
                    world.clone(),
                ),
            ),
            captioner: Some(Arc::new(SyntheticCaptioner::new(world.clone()))),
            judge: Some(Arc::new(SyntheticJudge::new(world))),
        }
    } else {
        let embed_endpoint = args.embed_endpoint.as_deref().ok_or_else(|| {
            Error::InvalidConfig("eval needs --embed-endpoint (or --synthetic)".into())
        })?;
        let vision = args.vision_endpoint.as_deref().map(|endpoint| {
            Arc::new(HttpVision::new(
                endpoint,
                &args.vision_model,
                api_key_from_env(API_KEY_ENV),
            ))
        });
        EvalBackends {
            embed: Arc::new(HttpEmbedding::new(
                embed_endpoint,
                &args.embed_model,
                api_key_from_env(EMBED_KEY_ENV),
            )),
            captioner: vision.clone().map(|v| v as _),
            judge: vision.map(|v| v as _),
        }
    };

    let mut report = evalkit::evaluate_run_set(&samples, &metrics, &backends)?;
    if let Some(path) = &args.judgments {
        let sheet = evalkit::load_judgments(path)?;
        report.win_rate = Some(evalkit::win_rate(&sheet)?);
    }

    std::fs::create_dir_all(&args.out)?;
    let json_path = args.out.join("report.json");
    let csv_path = args.out.join("report.csv");
    evalkit::write_report_json(&report, &json_path)?;
    evalkit::write_report_csv(&report, &csv_path)?;
    for (metric, summary) in &report.summaries {
        match summary.mean {
            Some(mean) => println!(
                "{metric}: mean {mean:.3} over {} samples ({} excluded)",
                summary.count, summary.excluded
            ),
            None => println!(
                "{metric}: no scored samples ({} excluded)",
                summary.excluded
            ),
        }
    }
    if let Some(wr) = &report.win_rate {
        println!("win rate A: {:.3} | B: {:.3}", wr.win_rate_a, wr.win_rate_b);
    }
    println!("report: {}", json_path.display());
    Ok(())
}
