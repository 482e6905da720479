//! Evaluation metrics and benchmark ingestion: CLIP score, captioning
//! score, judge score, win-rate aggregation, and per-category rollups
//! emitted as JSON + CSV reports.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backends::{EmbeddingBackend, VisionBackend};
use crate::domain::Prompt;
use crate::error::{Error, Result};
use crate::scorer::{self, EmbeddingCache};

/// Which benchmark a prompt came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkSource {
    Drawbench,
    Compbench,
    Custom,
}

impl FromStr for BenchmarkSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drawbench" => Ok(BenchmarkSource::Drawbench),
            "compbench" => Ok(BenchmarkSource::Compbench),
            "custom" => Ok(BenchmarkSource::Custom),
            other => Err(Error::InvalidInput(format!(
                "unknown benchmark source {other:?}"
            ))),
        }
    }
}

/// One benchmark prompt with its compositional category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkPrompt {
    pub text: String,
    pub category: String,
    pub source: BenchmarkSource,
}

/// Loads a `prompt,category` CSV. For compbench subsets, any category
/// whose count differs from 25 produces one warning.
pub fn load_benchmark(
    path: &Path,
    source: BenchmarkSource,
) -> Result<(Vec<BenchmarkPrompt>, Vec<String>)> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("cannot open benchmark {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("benchmark has no header: {e}")))?
        .clone();
    let prompt_col = headers.iter().position(|h| h == "prompt");
    let category_col = headers.iter().position(|h| h == "category");
    let (Some(prompt_col), Some(category_col)) = (prompt_col, category_col) else {
        return Err(Error::Data(
            "benchmark header must contain `prompt` and `category` columns".into(),
        ));
    };

    let mut prompts = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Data(format!("bad benchmark row: {e}")))?;
        let text = row.get(prompt_col).unwrap_or("").trim().to_string();
        let category = row.get(category_col).unwrap_or("").trim().to_string();
        if text.is_empty() || category.is_empty() {
            return Err(Error::Data(format!(
                "benchmark row {} has an empty prompt or category",
                prompts.len() + 1
            )));
        }
        prompts.push(BenchmarkPrompt {
            text,
            category,
            source,
        });
    }
    if prompts.is_empty() {
        return Err(Error::Data("benchmark file holds no prompts".into()));
    }

    let mut warnings = Vec::new();
    if source == BenchmarkSource::Compbench {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for p in &prompts {
            *counts.entry(p.category.as_str()).or_default() += 1;
        }
        for (category, count) in counts {
            if count != 25 {
                warnings.push(format!(
                    "compbench category {category:?} holds {count} prompts, expected 25"
                ));
            }
        }
    }
    Ok((prompts, warnings))
}

/// CLIP score: identical computation to the scorer's global score,
/// exposed under the metric name for reports.
pub fn clip_score(
    image_digest: &str,
    image_bytes: &[u8],
    prompt: &Prompt,
    backend: &dyn EmbeddingBackend,
    cache: &EmbeddingCache,
) -> Result<f64> {
    scorer::score_global(image_digest, image_bytes, prompt, backend, cache)
}

const CAPTION_INSTRUCTION: &str = "Describe this image in one short sentence.";

/// Captioning score: cosine between the caption's text embedding and the
/// original prompt's text embedding.
pub fn captioning_score(
    image_bytes: &[u8],
    prompt: &Prompt,
    captioner: &dyn VisionBackend,
    backend: &dyn EmbeddingBackend,
    cache: &EmbeddingCache,
) -> Result<f64> {
    let caption = captioner.describe(image_bytes, CAPTION_INSTRUCTION)?;
    if caption.trim().is_empty() {
        return Err(Error::Data("captioner returned an empty caption".into()));
    }
    let vectors = cache.texts(&[caption.as_str(), prompt.text.as_str()], backend)?;
    scorer::cosine(&vectors[0].values, &vectors[1].values)
}

/// Category-specific judging templates, checked in as fixtures. Every
/// template carries a `Prompt: {prompt}` line and asks for one number in
/// [0, 1].
fn judge_template(category: &str) -> &'static str {
    let folded = category.to_lowercase();
    if folded.contains("color")
        || folded.contains("texture")
        || folded.contains("shape")
        || folded.contains("attribute")
    {
        include_str!("../fixtures/judge/attributes.txt")
    } else if folded.contains("spatial") || folded.contains("position") {
        include_str!("../fixtures/judge/spatial.txt")
    } else if folded.contains("numeracy") || folded.contains("count") {
        include_str!("../fixtures/judge/numeracy.txt")
    } else if folded.contains("text") {
        include_str!("../fixtures/judge/text.txt")
    } else if folded.contains("conflict") {
        include_str!("../fixtures/judge/conflicting.txt")
    } else {
        include_str!("../fixtures/judge/default.txt")
    }
}

const VQA_TEMPLATE: &str = include_str!("../fixtures/judge/vqa.txt");

/// First decimal number in a reply, if any.
fn first_number(reply: &str) -> Option<f64> {
    let mut run = String::new();
    let mut runs = Vec::new();
    for c in reply.chars() {
        if c.is_ascii_digit() || c == '.' {
            run.push(c);
        } else if !run.is_empty() {
            runs.push(std::mem::take(&mut run));
        }
    }
    if !run.is_empty() {
        runs.push(run);
    }
    runs.into_iter().find_map(|r| {
        let trimmed = r.trim_end_matches('.');
        if !trimmed.chars().any(|c| c.is_ascii_digit()) {
            return None;
        }
        trimmed
            .parse::<f64>()
            .ok()
            .or_else(|| trimmed.trim_start_matches('.').parse::<f64>().ok())
    })
}

fn judge_with_template(
    image_bytes: &[u8],
    prompt: &Prompt,
    judge: &dyn VisionBackend,
    template: &str,
) -> Result<f64> {
    let instruction = template.replace("{prompt}", &prompt.text);
    for attempt in 0..2 {
        let reply = judge.describe(image_bytes, &instruction)?;
        if let Some(value) = first_number(&reply) {
            return Ok(value.clamp(0.0, 1.0));
        }
        if attempt == 0 {
            log::warn!("judge reply had no parseable score, retrying once");
        }
    }
    Err(Error::Data(
        "judge reply carried no parseable score after one retry".into(),
    ))
}

/// Judge score: renders the category template, asks the judge, parses
/// the first decimal number, and clamps to [0, 1]. One retry on an
/// unparseable reply.
pub fn judge_score(
    image_bytes: &[u8],
    prompt: &Prompt,
    judge: &dyn VisionBackend,
    category: &str,
) -> Result<f64> {
    judge_with_template(image_bytes, prompt, judge, judge_template(category))
}

/// VQA-style judge variant (question generation + answering inside the
/// judge). Reported under a distinct name so it is never confused with
/// captioner-based VQA numbers.
pub fn vqa_judge_score(
    image_bytes: &[u8],
    prompt: &Prompt,
    judge: &dyn VisionBackend,
) -> Result<f64> {
    judge_with_template(image_bytes, prompt, judge, VQA_TEMPLATE)
}

/// One evaluator's verdict on a side-by-side comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vote {
    A,
    B,
    Tie,
}

impl FromStr for Vote {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "a" => Ok(Vote::A),
            "b" => Ok(Vote::B),
            "tie" => Ok(Vote::Tie),
            other => Err(Error::Data(format!("unknown vote {other:?}"))),
        }
    }
}

/// Three evaluator votes per prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgmentSheet {
    pub entries: Vec<(String, [Vote; 3])>,
}

/// Per-prompt outcome as A's share of the win.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptOutcome {
    pub prompt: String,
    pub share_a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinRateReport {
    /// Majority-vote aggregation: each prompt contributes 1, 0.5, or 0.
    pub win_rate_a: f64,
    pub win_rate_b: f64,
    /// Alternative aggregation: the mean over individual votes
    /// (A = 1, tie = 0.5, B = 0), emitted so both published readings of
    /// the protocol are available.
    pub avg_vote_share_a: f64,
    pub avg_vote_share_b: f64,
    pub per_prompt: Vec<PromptOutcome>,
}

/// Majority-vote win rate. A 1-1-tie pattern splits 0.5/0.5, as does a
/// tie majority. win_rate_b is 1 - win_rate_a by construction.
pub fn win_rate(sheet: &JudgmentSheet) -> Result<WinRateReport> {
    if sheet.entries.is_empty() {
        return Err(Error::InvalidInput("judgment sheet is empty".into()));
    }
    let mut per_prompt = Vec::with_capacity(sheet.entries.len());
    let mut total_a = 0.0;
    let mut vote_points_a = 0.0;
    for (prompt, votes) in &sheet.entries {
        let a = votes.iter().filter(|v| **v == Vote::A).count();
        let b = votes.iter().filter(|v| **v == Vote::B).count();
        let share_a = if a >= 2 {
            1.0
        } else if b >= 2 {
            0.0
        } else {
            0.5
        };
        total_a += share_a;
        for v in votes {
            vote_points_a += match v {
                Vote::A => 1.0,
                Vote::Tie => 0.5,
                Vote::B => 0.0,
            };
        }
        per_prompt.push(PromptOutcome {
            prompt: prompt.clone(),
            share_a,
        });
    }
    let n = sheet.entries.len() as f64;
    let win_rate_a = total_a / n;
    let avg_vote_share_a = vote_points_a / (3.0 * n);
    Ok(WinRateReport {
        win_rate_a,
        win_rate_b: 1.0 - win_rate_a,
        avg_vote_share_a,
        avg_vote_share_b: 1.0 - avg_vote_share_a,
        per_prompt,
    })
}

/// Loads a `prompt,vote1,vote2,vote3` CSV into a judgment sheet.
pub fn load_judgments(path: &Path) -> Result<JudgmentSheet> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("cannot open judgments {}: {e}", path.display())))?;
    let mut entries = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Data(format!("bad judgments row: {e}")))?;
        if row.len() < 4 {
            return Err(Error::Data("judgments rows need prompt,vote1,vote2,vote3".into()));
        }
        let votes = [
            row.get(1).unwrap_or("").parse()?,
            row.get(2).unwrap_or("").parse()?,
            row.get(3).unwrap_or("").parse()?,
        ];
        entries.push((row.get(0).unwrap_or("").to_string(), votes));
    }
    if entries.is_empty() {
        return Err(Error::Data("judgments file holds no rows".into()));
    }
    Ok(JudgmentSheet { entries })
}

/// Which metrics to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Clip,
    Captioning,
    Judge,
    VqaJudge,
}

impl MetricKind {
    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::Clip => "clip",
            MetricKind::Captioning => "captioning",
            MetricKind::Judge => "judge",
            MetricKind::VqaJudge => "vqa_judge",
        }
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clip" => Ok(MetricKind::Clip),
            "captioning" => Ok(MetricKind::Captioning),
            "judge" => Ok(MetricKind::Judge),
            "vqa_judge" => Ok(MetricKind::VqaJudge),
            other => Err(Error::InvalidInput(format!("unknown metric {other:?}"))),
        }
    }
}

/// One evaluated image with its originating prompt and category.
#[derive(Debug, Clone)]
pub struct EvalSample {
    pub prompt: String,
    pub category: String,
    pub image_digest: String,
    pub image_bytes: Vec<u8>,
}

/// Backends the metric suite draws on. Captioning and judge metrics are
/// skipped with a per-sample error when their backend is absent.
pub struct EvalBackends {
    pub embed: std::sync::Arc<dyn EmbeddingBackend>,
    pub captioner: Option<std::sync::Arc<dyn VisionBackend>>,
    pub judge: Option<std::sync::Arc<dyn VisionBackend>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub prompt: String,
    pub category: String,
    pub metric: String,
    pub value: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: Option<f64>,
    pub count: usize,
    pub excluded: usize,
    pub per_category: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<SampleRow>,
    pub summaries: BTreeMap<String, MetricSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub win_rate: Option<WinRateReport>,
}

/// Computes the selected metrics for every sample and rolls them up into
/// overall and per-category means. Partial failures are recorded per
/// sample and excluded from means with a count.
pub fn evaluate_run_set(
    samples: &[EvalSample],
    metrics: &[MetricKind],
    backends: &EvalBackends,
) -> Result<Report> {
    if metrics.is_empty() {
        return Err(Error::InvalidInput("no metrics selected".into()));
    }
    if samples.is_empty() {
        return Err(Error::InvalidInput("no samples to evaluate".into()));
    }
    let cache = EmbeddingCache::new();
    let mut rows = Vec::new();
    for sample in samples {
        let prompt = Prompt::new("eval", sample.prompt.clone())?;
        for metric in metrics {
            let value = compute_metric(sample, &prompt, *metric, backends, &cache);
            rows.push(SampleRow {
                prompt: sample.prompt.clone(),
                category: sample.category.clone(),
                metric: metric.name().to_string(),
                value: value.as_ref().ok().copied(),
                error: value.err().map(|e| e.to_string()),
            });
        }
    }
    let summaries = summarize(&rows);
    Ok(Report {
        rows,
        summaries,
        win_rate: None,
    })
}

fn compute_metric(
    sample: &EvalSample,
    prompt: &Prompt,
    metric: MetricKind,
    backends: &EvalBackends,
    cache: &EmbeddingCache,
) -> Result<f64> {
    match metric {
        MetricKind::Clip => clip_score(
            &sample.image_digest,
            &sample.image_bytes,
            prompt,
            backends.embed.as_ref(),
            cache,
        ),
        MetricKind::Captioning => {
            let captioner = backends
                .captioner
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("no caption backend configured".into()))?;
            captioning_score(
                &sample.image_bytes,
                prompt,
                captioner.as_ref(),
                backends.embed.as_ref(),
                cache,
            )
        }
        MetricKind::Judge => {
            let judge = backends
                .judge
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("no judge backend configured".into()))?;
            judge_score(&sample.image_bytes, prompt, judge.as_ref(), &sample.category)
        }
        MetricKind::VqaJudge => {
            let judge = backends
                .judge
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("no judge backend configured".into()))?;
            vqa_judge_score(&sample.image_bytes, prompt, judge.as_ref())
        }
    }
}

fn summarize(rows: &[SampleRow]) -> BTreeMap<String, MetricSummary> {
    let mut summaries: BTreeMap<String, MetricSummary> = BTreeMap::new();
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut cat_sums: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    for row in rows {
        let summary = summaries.entry(row.metric.clone()).or_default();
        match row.value {
            Some(v) => {
                summary.count += 1;
                let slot = sums.entry(row.metric.clone()).or_default();
                slot.0 += v;
                slot.1 += 1;
                let cat = cat_sums
                    .entry((row.metric.clone(), row.category.clone()))
                    .or_default();
                cat.0 += v;
                cat.1 += 1;
            }
            None => summary.excluded += 1,
        }
    }
    for (metric, (sum, n)) in sums {
        if let Some(summary) = summaries.get_mut(&metric) {
            summary.mean = Some(sum / n as f64);
        }
    }
    for ((metric, category), (sum, n)) in cat_sums {
        if let Some(summary) = summaries.get_mut(&metric) {
            summary.per_category.insert(category, sum / n as f64);
        }
    }
    summaries
}

/// Writes the full report (per-sample rows + summaries) as JSON.
pub fn write_report_json(report: &Report, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Writes the summary table as CSV, 3-decimal presentation.
pub fn write_report_csv(report: &Report, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("cannot write report csv: {e}")))?;
    writer
        .write_record(["metric", "category", "mean", "count", "excluded"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for (metric, summary) in &report.summaries {
        let mean = summary
            .mean
            .map(|m| format!("{m:.3}"))
            .unwrap_or_default();
        writer
            .write_record([
                metric.as_str(),
                "overall",
                &mean,
                &summary.count.to_string(),
                &summary.excluded.to_string(),
            ])
            .map_err(|e| Error::Data(e.to_string()))?;
        for (category, mean) in &summary.per_category {
            writer
                .write_record([metric.as_str(), category, &format!("{mean:.3}"), "", ""])
                .map_err(|e| Error::Data(e.to_string()))?;
        }
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    struct FixedJudge {
        replies: std::sync::Mutex<Vec<String>>,
    }

    impl FixedJudge {
        fn new(replies: &[&str]) -> Self {
            Self {
                replies: std::sync::Mutex::new(replies.iter().rev().map(|s| s.to_string()).collect()),
            }
        }
    }

    impl VisionBackend for FixedJudge {
        fn describe(&self, _image: &[u8], _instruction: &str) -> Result<String> {
            Ok(self
                .replies
                .lock()
                .unwrap()
                .pop()
                .unwrap_or_else(|| "no more replies".to_string()))
        }
    }

    fn prompt() -> Prompt {
        Prompt::new("p", "a blue pizza").unwrap()
    }

    #[test]
    fn judge_parses_plain_score() {
        let judge = FixedJudge::new(&["0.85"]);
        let v = judge_score(b"img", &prompt(), &judge, "color binding").unwrap();
        assert_eq!(v, 0.85);
    }

    #[test]
    fn judge_clamps_out_of_range() {
        let judge = FixedJudge::new(&["Score: 1.2 because it nails everything"]);
        let v = judge_score(b"img", &prompt(), &judge, "numeracy").unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn judge_excludes_after_two_unparseable_replies() {
        let judge = FixedJudge::new(&["great image", "truly great image"]);
        assert!(judge_score(b"img", &prompt(), &judge, "complex").is_err());
    }

    #[test]
    fn first_number_scans_past_words() {
        assert_eq!(first_number("the score is .75 overall"), Some(0.75));
        assert_eq!(first_number("Score: 0.85."), Some(0.85));
        assert_eq!(first_number("nothing here"), None);
        assert_eq!(first_number("dots ... then 0.5"), Some(0.5));
    }

    #[test]
    fn win_rate_majority_and_splits() {
        let sheet = JudgmentSheet {
            entries: vec![
                ("p1".into(), [Vote::A, Vote::A, Vote::B]),
                ("p2".into(), [Vote::B, Vote::B, Vote::A]),
            ],
        };
        let report = win_rate(&sheet).unwrap();
        assert_eq!(report.win_rate_a, 0.5);
        assert_eq!(report.win_rate_b, 0.5);

        let sheet = JudgmentSheet {
            entries: vec![("p1".into(), [Vote::A, Vote::B, Vote::Tie])],
        };
        let report = win_rate(&sheet).unwrap();
        assert_eq!(report.win_rate_a, 0.5);
        assert_eq!(report.per_prompt[0].share_a, 0.5);
    }

    #[test]
    fn win_rates_sum_to_one_exactly() {
        let sheet = JudgmentSheet {
            entries: vec![
                ("p1".into(), [Vote::A, Vote::A, Vote::A]),
                ("p2".into(), [Vote::B, Vote::B, Vote::A]),
                ("p3".into(), [Vote::A, Vote::Tie, Vote::B]),
            ],
        };
        let report = win_rate(&sheet).unwrap();
        assert_eq!(report.win_rate_a + report.win_rate_b, 1.0);
        assert_eq!(report.avg_vote_share_a + report.avg_vote_share_b, 1.0);
    }

    fn write_csv(rows: &[(&str, &str)]) -> tempfile::NamedTempFile {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "prompt,category").unwrap();
        for (p, c) in rows {
            writeln!(file, "{p},{c}").unwrap();
        }
        file.flush().unwrap();
        file
    }

    #[test]
    fn benchmark_8x25_loads_clean() {
        let rows: Vec<(String, String)> = (0..8)
            .flat_map(|c| (0..25).map(move |i| (format!("prompt {c} {i}"), format!("cat{c}"))))
            .collect();
        let borrowed: Vec<(&str, &str)> = rows
            .iter()
            .map(|(p, c)| (p.as_str(), c.as_str()))
            .collect();
        let file = write_csv(&borrowed);
        let (prompts, warnings) =
            load_benchmark(file.path(), BenchmarkSource::Compbench).unwrap();
        assert_eq!(prompts.len(), 200);
        assert!(warnings.is_empty());
    }

    #[test]
    fn benchmark_short_category_warns_once_but_loads() {
        let rows: Vec<(String, String)> = (0..8)
            .flat_map(|c| {
                let n = if c == 7 { 24 } else { 25 };
                (0..n).map(move |i| (format!("prompt {c} {i}"), format!("cat{c}")))
            })
            .collect();
        let borrowed: Vec<(&str, &str)> = rows
            .iter()
            .map(|(p, c)| (p.as_str(), c.as_str()))
            .collect();
        let file = write_csv(&borrowed);
        let (prompts, warnings) =
            load_benchmark(file.path(), BenchmarkSource::Compbench).unwrap();
        assert_eq!(prompts.len(), 199);
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn benchmark_missing_header_errors() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "text,kind").unwrap();
        writeln!(file, "a,b").unwrap();
        file.flush().unwrap();
        assert!(load_benchmark(file.path(), BenchmarkSource::Custom).is_err());
    }

    #[test]
    fn metric_names_parse() {
        assert_eq!("clip".parse::<MetricKind>().unwrap(), MetricKind::Clip);
        assert_eq!(
            "vqa_judge".parse::<MetricKind>().unwrap(),
            MetricKind::VqaJudge
        );
        assert!("accuracy".parse::<MetricKind>().is_err());
    }

    use crate::backends::synthetic::{encode_image, SyntheticCaptioner, SyntheticWorld};
    use crate::scorer::EmbeddingCache;
    use std::sync::Arc;

    fn two_concept_world() -> Arc<SyntheticWorld> {
        Arc::new(SyntheticWorld {
            vocabulary: vec!["red cat".into(), "blue dog".into()],
            target: vec!["red cat".into(), "blue dog".into()],
            dropout_p: 0.0,
            noise_sigma: 0.0,
            seed: 3,
        })
    }

    #[test]
    fn captioning_score_is_one_for_identical_caption() {
        let world = two_concept_world();
        let embed = crate::backends::synthetic::SyntheticEmbeddingBackend::new(world.clone());
        let captioner = SyntheticCaptioner::new(world.clone());
        let cache = EmbeddingCache::new();
        let prompt = Prompt::new("p", "red cat, blue dog").unwrap();
        // The synthetic captioner reads back the full concept list, which
        // embeds identically to the prompt.
        let image = encode_image(&["red cat".into(), "blue dog".into()]);
        let score = captioning_score(&image, &prompt, &captioner, &embed, &cache).unwrap();
        assert!((score - 1.0).abs() < 1e-9);
    }

    #[test]
    fn captioning_score_half_coverage_is_hand_computable() {
        let world = two_concept_world();
        let embed = crate::backends::synthetic::SyntheticEmbeddingBackend::new(world.clone());
        let captioner = SyntheticCaptioner::new(world.clone());
        let cache = EmbeddingCache::new();
        let prompt = Prompt::new("p", "red cat, blue dog").unwrap();
        // Image holds one of two concepts: caption = "red cat", so the
        // text cosine is 1/sqrt(2).
        let image = encode_image(&["red cat".into()]);
        let score = captioning_score(&image, &prompt, &captioner, &embed, &cache).unwrap();
        assert!((score - 1.0 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn empty_caption_is_a_recorded_error() {
        let world = two_concept_world();
        let embed = crate::backends::synthetic::SyntheticEmbeddingBackend::new(world.clone());
        let captioner = SyntheticCaptioner::new(world.clone());
        let cache = EmbeddingCache::new();
        let prompt = Prompt::new("p", "red cat, blue dog").unwrap();
        let image = encode_image(&[]);
        assert!(captioning_score(&image, &prompt, &captioner, &embed, &cache).is_err());
    }

    #[test]
    fn category_templates_are_distinct_and_carry_the_prompt_slot() {
        let picked: Vec<&str> = [
            "color binding",
            "2d spatial relation",
            "numeracy",
            "text rendering",
            "conflicting",
            "complex",
        ]
        .iter()
        .map(|c| judge_template(c))
        .collect();
        for t in &picked {
            assert!(t.contains("Prompt: {prompt}"));
        }
        let unique: std::collections::HashSet<&str> = picked.iter().copied().collect();
        assert_eq!(unique.len(), picked.len(), "templates must differ per category");
    }

    #[test]
    fn report_csv_presents_three_decimals() {
        let report = Report {
            rows: vec![SampleRow {
                prompt: "p".into(),
                category: "c".into(),
                metric: "clip".into(),
                value: Some(0.123456),
                error: None,
            }],
            summaries: BTreeMap::from([(
                "clip".to_string(),
                MetricSummary {
                    mean: Some(0.123456),
                    count: 1,
                    excluded: 0,
                    per_category: BTreeMap::from([("c".to_string(), 0.123456)]),
                },
            )]),
            win_rate: None,
        };
        let file = tempfile::NamedTempFile::new().unwrap();
        write_report_csv(&report, file.path()).unwrap();
        let text = std::fs::read_to_string(file.path()).unwrap();
        assert!(text.contains("clip,overall,0.123,1,0"), "{text}");
        assert!(text.contains("clip,c,0.123,,"), "{text}");
    }
}
