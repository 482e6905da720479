//! Run directory layout and IO.
//!
//! Layout: `config.json`, `concepts.json`, `trace.jsonl`,
//! `candidates/<id>.json`, `images/<digest>.png`, plus `cache.json`
//! (persisted embedding cache so replays never call backends) and
//! `world.json` for synthetic runs. All JSON is UTF-8.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backends::synthetic::SyntheticWorld;
use crate::domain::{Candidate, ConceptSet, IterationRecord, Prompt, RunConfig};
use crate::error::{Error, Result};
use crate::extract::ExtractionReport;
use crate::scorer::{EmbedKind, EmbeddingCache};
use crate::seeds::sha256_hex;

pub const TRACE_SCHEMA: u32 = 1;

/// One line of `trace.jsonl`: the iteration record plus a schema tag.
#[derive(Debug, Serialize, Deserialize)]
struct TraceLine {
    schema: u32,
    #[serde(flatten)]
    record: IterationRecord,
}

/// `concepts.json`: the prompt, its concept set, and the extraction
/// audit trail.
#[derive(Debug, Serialize, Deserialize)]
pub struct ConceptsFile {
    pub schema: u32,
    pub prompt: Prompt,
    pub concept_set: ConceptSet,
    pub report: ExtractionReport,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    kind: String,
    digest: String,
    values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheFile {
    schema: u32,
    entries: Vec<CacheEntry>,
}

/// Handle on one run directory.
#[derive(Debug, Clone)]
pub struct RunStore {
    root: PathBuf,
}

impl RunStore {
    /// Creates the directory layout (idempotent).
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root.join("images"))?;
        fs::create_dir_all(root.join("candidates"))?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    /// Opens an existing run directory.
    pub fn open(root: &Path) -> Result<Self> {
        if !root.join("config.json").is_file() {
            return Err(Error::Data(format!(
                "{} is not a run directory (no config.json)",
                root.display()
            )));
        }
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        atomic_write(&self.root.join(name), text.as_bytes())
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, name: &str) -> Result<T> {
        let path = self.root.join(name);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("corrupt {}: {e}", path.display())))
    }

    pub fn write_config(&self, config: &RunConfig) -> Result<()> {
        self.write_json("config.json", config)
    }

    pub fn read_config(&self) -> Result<RunConfig> {
        self.read_json("config.json")
    }

    pub fn write_concepts(&self, file: &ConceptsFile) -> Result<()> {
        self.write_json("concepts.json", file)
    }

    pub fn read_concepts(&self) -> Result<ConceptsFile> {
        self.read_json("concepts.json")
    }

    pub fn write_world(&self, world: &SyntheticWorld) -> Result<()> {
        self.write_json("world.json", world)
    }

    pub fn read_world(&self) -> Result<Option<SyntheticWorld>> {
        if self.root.join("world.json").is_file() {
            Ok(Some(self.read_json("world.json")?))
        } else {
            Ok(None)
        }
    }

    pub fn trace_path(&self) -> PathBuf {
        self.root.join("trace.jsonl")
    }

    /// Appends one record as a single `\n`-terminated JSON line and
    /// flushes it.
    pub fn append_trace(&self, record: &IterationRecord) -> Result<()> {
        let line = render_trace_line(record)?;
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.trace_path())?;
        file.write_all(line.as_bytes())?;
        file.write_all(b"\n")?;
        file.flush()?;
        Ok(())
    }

    /// Reads the trace. A corrupt or truncated final line (including a
    /// parseable line missing its `\n` terminator, the crash window
    /// between the two append writes) is dropped, returning `true` in
    /// the second slot. Corruption anywhere else is an error.
    pub fn read_trace(&self) -> Result<(Vec<IterationRecord>, bool)> {
        let (records, _, dropped) = self.parse_trace()?;
        Ok((records, dropped))
    }

    /// Like [`read_trace`](Self::read_trace) but physically truncates a
    /// dropped tail from the file so subsequent appends start clean.
    pub fn read_trace_repairing(&self) -> Result<(Vec<IterationRecord>, bool)> {
        let (records, valid_end, dropped) = self.parse_trace()?;
        if dropped {
            log::warn!("truncating corrupt trailing trace line");
            let file = fs::OpenOptions::new().write(true).open(self.trace_path())?;
            file.set_len(valid_end as u64)?;
        }
        Ok((records, dropped))
    }

    fn parse_trace(&self) -> Result<(Vec<IterationRecord>, usize, bool)> {
        let path = self.trace_path();
        if !path.is_file() {
            return Ok((Vec::new(), 0, false));
        }
        let text = fs::read_to_string(&path)?;
        // Split into (line, end-offset-including-newline) pairs by hand:
        // byte offsets drive tail truncation on repair.
        let mut lines: Vec<(&str, usize, bool)> = Vec::new();
        let mut start = 0;
        while start < text.len() {
            match text[start..].find('\n') {
                Some(rel) => {
                    lines.push((&text[start..start + rel], start + rel + 1, true));
                    start += rel + 1;
                }
                None => {
                    lines.push((&text[start..], text.len(), false));
                    break;
                }
            }
        }

        let mut records = Vec::with_capacity(lines.len());
        let mut valid_end = 0;
        let mut dropped_tail = false;
        for (i, (line, end, terminated)) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                valid_end = *end;
                continue;
            }
            let last = i + 1 == lines.len();
            match serde_json::from_str::<TraceLine>(line) {
                Ok(parsed) if *terminated || !last => {
                    if parsed.schema != TRACE_SCHEMA {
                        return Err(Error::Data(format!(
                            "unsupported trace schema {} at line {}",
                            parsed.schema,
                            i + 1
                        )));
                    }
                    records.push(parsed.record);
                    valid_end = *end;
                }
                Ok(_) | Err(_) if last => {
                    log::warn!("dropping corrupt or unterminated trailing trace line");
                    dropped_tail = true;
                }
                Err(e) => {
                    return Err(Error::Data(format!("corrupt trace line {}: {e}", i + 1)));
                }
                Ok(_) => unreachable!("non-last lines are either parsed or errored"),
            }
        }
        Ok((records, valid_end, dropped_tail))
    }

    pub fn write_candidate(&self, candidate: &Candidate) -> Result<()> {
        self.write_json(&format!("candidates/{}.json", candidate.id), candidate)
    }

    pub fn read_candidate(&self, id: &str) -> Result<Candidate> {
        self.read_json(&format!("candidates/{id}.json"))
    }

    pub fn image_rel_path(digest: &str) -> String {
        format!("images/{digest}.png")
    }

    pub fn image_path(&self, digest: &str) -> PathBuf {
        self.root.join(Self::image_rel_path(digest))
    }

    /// Stores image bytes under their digest. Concurrent writers of the
    /// same digest write identical bytes, so last-rename-wins is safe.
    pub fn write_image(&self, digest: &str, bytes: &[u8]) -> Result<()> {
        atomic_write(&self.image_path(digest), bytes)
    }

    /// Loads image bytes and verifies them against the digest.
    pub fn read_image(&self, digest: &str) -> Result<Vec<u8>> {
        let path = self.image_path(digest);
        let bytes = fs::read(&path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        let actual = sha256_hex(&bytes);
        if actual != digest {
            return Err(Error::Data(format!(
                "image digest mismatch for {}: stored {digest}, bytes hash to {actual}",
                path.display()
            )));
        }
        Ok(bytes)
    }

    pub fn write_cache(&self, cache: &EmbeddingCache) -> Result<()> {
        let entries = cache
            .snapshot()
            .into_iter()
            .map(|(kind, digest, values)| CacheEntry {
                kind: match kind {
                    EmbedKind::Text => "text".to_string(),
                    EmbedKind::Image => "image".to_string(),
                },
                digest,
                values,
            })
            .collect();
        self.write_json(
            "cache.json",
            &CacheFile {
                schema: 1,
                entries,
            },
        )
    }

    /// Restores the persisted embedding cache, if any.
    pub fn load_cache(&self, cache: &EmbeddingCache) -> Result<bool> {
        if !self.root.join("cache.json").is_file() {
            return Ok(false);
        }
        let file: CacheFile = self.read_json("cache.json")?;
        let entries = file
            .entries
            .into_iter()
            .map(|e| {
                let kind = match e.kind.as_str() {
                    "text" => EmbedKind::Text,
                    "image" => EmbedKind::Image,
                    other => return Err(Error::Data(format!("unknown cache kind {other:?}"))),
                };
                Ok((kind, e.digest, e.values))
            })
            .collect::<Result<Vec<_>>>()?;
        cache.restore(entries);
        Ok(true)
    }
}

/// One trace line in the run-log format, schema tag first.
pub fn render_trace_line(record: &IterationRecord) -> Result<String> {
    Ok(serde_json::to_string(&TraceLine {
        schema: TRACE_SCHEMA,
        record: record.clone(),
    })?)
}

/// Write-to-temp-then-rename so readers never observe a torn file. The
/// temp name is unique per write: concurrent workers may store the same
/// digest (identical bytes) and each needs its own temp file.
fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    static WRITE_COUNTER: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);
    let parent = path
        .parent()
        .ok_or_else(|| Error::Data(format!("{} has no parent", path.display())))?;
    let tmp = parent.join(format!(
        ".tmp.{}.{}.{}",
        std::process::id(),
        WRITE_COUNTER.fetch_add(1, std::sync::atomic::Ordering::SeqCst),
        path.file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_default()
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
