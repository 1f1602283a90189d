//! Append-only store of solved-task traces and the error→fix pairs mined
//! from them, searched by exact cosine scan over feedback embeddings.
//!
//! On disk the base is a JSON-lines file: a `{"schema_version":1}` header
//! followed by `{"kind":"entry",...}` and `{"kind":"pair",...}` records.

use std::cmp::Ordering;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{RwLock, RwLockReadGuard, RwLockWriteGuard};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use similar::{capture_diff_slices, Algorithm, DiffOp};
use thiserror::Error;

use crate::gateway::{ChatMessage, Embedding, Gateway, GatewayError, Role};
use crate::model::{
    truncate_chars, CandidateSolution, ExecutionOutcome, FeedbackBundle, FormatReport, Provenance, TaskId, TrialRecord,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_TOP_N_FIXES: usize = 3;
pub const DEFAULT_TOP_N_SIMILAR: usize = 1;
pub const DEFAULT_MIN_SIM: f64 = 0.80;
const MAX_FIX_STEPS: usize = 8;
const STEP_SNIPPET: usize = 160;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("knowledge base schema_version {found} is not supported (expected {SCHEMA_VERSION})")]
    SchemaVersion { found: u64 },
    #[error("{path}: line {line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid knowledge entry: {0}")]
    InvalidEntry(String),
    #[error("query text is empty")]
    EmptyQuery,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub entry_id: String,
    pub task_id: TaskId,
    pub task_description: String,
    pub trace: Vec<TrialRecord>,
    pub final_solution: CandidateSolution,
    pub success: bool,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description_embedding: Option<Embedding>,
}

impl KnowledgeEntry {
    /// Builds an entry from a finished trace. `entry_id` is assigned on
    /// insertion.
    pub fn from_trace(
        task_id: TaskId,
        task_description: impl Into<String>,
        trace: Vec<TrialRecord>,
        success: bool,
        created_at: DateTime<Utc>,
    ) -> Result<Self, KbError> {
        let last = trace
            .last()
            .ok_or_else(|| KbError::InvalidEntry("trace is empty".into()))?;
        let final_solution = CandidateSolution {
            task_id: task_id.clone(),
            code: last.code.clone(),
            attempt_index: last.attempt_index,
            provenance: if trace.len() == 1 {
                Provenance::LlmDraft
            } else {
                Provenance::LlmRepair
            },
        };
        Ok(Self {
            entry_id: String::new(),
            task_id,
            task_description: task_description.into(),
            trace,
            final_solution,
            success,
            created_at,
            description_embedding: None,
        })
    }

    pub fn validate(&self) -> Result<(), KbError> {
        let bad = |m: String| Err(KbError::InvalidEntry(format!("{}: {m}", self.task_id)));
        for (i, t) in self.trace.iter().enumerate() {
            if t.attempt_index as usize != i {
                return bad(format!("trace attempt {} at position {i}", t.attempt_index));
            }
            if t.code.is_empty() {
                return bad(format!("trial {i} has empty code"));
            }
        }
        if self.success {
            match self.trace.last() {
                None => return bad("successful entry has an empty trace".into()),
                Some(t) if t.code != self.final_solution.code => {
                    return bad("final solution differs from the last trial".into())
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorFixPair {
    pub pair_id: String,
    pub error_text: String,
    pub failing_code: String,
    pub fixed_code: String,
    pub fix_steps: Vec<String>,
    pub error_embedding: Embedding,
    pub source_entry: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub pair: ErrorFixPair,
    pub similarity: f64,
}

/// Similarity descending, then id ascending.
pub fn hit_order(a_sim: f64, a_id: &str, b_sim: f64, b_id: &str) -> Ordering {
    b_sim.total_cmp(&a_sim).then_with(|| a_id.cmp(b_id))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FixStepSource {
    /// Line-diff summary of failing vs fixed code.
    #[default]
    Diff,
    /// One extra chat call per pair.
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbStats {
    pub entries: usize,
    pub successful_entries: usize,
    pub pairs: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Entry(KnowledgeEntry),
    Pair(ErrorFixPair),
}

#[derive(Debug, Default)]
struct Inner {
    entries: Vec<KnowledgeEntry>,
    pairs: Vec<ErrorFixPair>,
    sink: Option<(PathBuf, File)>,
}

impl Inner {
    fn append(&mut self, records: &[Record]) -> Result<(), KbError> {
        let Some((path, file)) = &mut self.sink else {
            return Ok(());
        };
        let mut buf = String::new();
        for r in records {
            buf.push_str(&serde_json::to_string(r).expect("records serialize"));
            buf.push('\n');
        }
        file.write_all(buf.as_bytes())
            .and_then(|_| file.flush())
            .map_err(|source| KbError::Io {
                path: path.clone(),
                source,
            })
    }
}

/// Thread-safe knowledge base: concurrent readers, serialized writers.
#[derive(Debug, Default)]
pub struct KnowledgeBase {
    inner: RwLock<Inner>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> KbError + '_ {
    move |source| KbError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl KnowledgeBase {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads `path` (creating it with a header if absent) and appends every
    /// later insertion to it.
    pub fn open(path: &Path) -> Result<Self, KbError> {
        let kb = if path.exists() {
            Self::load(path)?
        } else {
            Self::in_memory()
        };
        let empty = !path.exists() || std::fs::metadata(path).map_err(io_err(path))?.len() == 0;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        if empty {
            writeln!(file, "{{\"schema_version\":{SCHEMA_VERSION}}}").map_err(io_err(path))?;
        }
        kb.write().sink = Some((path.to_path_buf(), file));
        Ok(kb)
    }

    pub fn load(path: &Path) -> Result<Self, KbError> {
        let file = File::open(path).map_err(io_err(path))?;
        let mut inner = Inner::default();
        let malformed = |line: usize, message: String| KbError::Malformed {
            path: path.to_path_buf(),
            line,
            message,
        };
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            let lineno = i + 1;
            if lineno == 1 {
                let header: serde_json::Value = serde_json::from_str(&line).map_err(|e| malformed(1, e.to_string()))?;
                let found = header
                    .get("schema_version")
                    .and_then(serde_json::Value::as_u64)
                    .ok_or_else(|| malformed(1, "missing schema_version header".into()))?;
                if found != u64::from(SCHEMA_VERSION) {
                    return Err(KbError::SchemaVersion { found });
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Record>(&line).map_err(|e| malformed(lineno, e.to_string()))? {
                Record::Entry(e) => inner.entries.push(e),
                Record::Pair(p) => inner.pairs.push(p),
            }
        }
        Ok(Self {
            inner: RwLock::new(inner),
        })
    }

    /// Writes a complete copy of the base to `path`.
    pub fn persist(&self, path: &Path) -> Result<(), KbError> {
        let inner = self.read();
        let mut out = format!("{{\"schema_version\":{SCHEMA_VERSION}}}\n");
        for e in &inner.entries {
            out.push_str(&serde_json::to_string(&Record::Entry(e.clone())).expect("serialize"));
            out.push('\n');
        }
        for p in &inner.pairs {
            out.push_str(&serde_json::to_string(&Record::Pair(p.clone())).expect("serialize"));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(io_err(path))
    }

    fn read(&self) -> RwLockReadGuard<'_, Inner> {
        self.inner.read().expect("knowledge base lock poisoned")
    }

    fn write(&self) -> RwLockWriteGuard<'_, Inner> {
        self.inner.write().expect("knowledge base lock poisoned")
    }

    pub fn entries(&self) -> Vec<KnowledgeEntry> {
        self.read().entries.clone()
    }

    pub fn pairs(&self) -> Vec<ErrorFixPair> {
        self.read().pairs.clone()
    }

    pub fn stats(&self) -> KbStats {
        let inner = self.read();
        KbStats {
            entries: inner.entries.len(),
            successful_entries: inner.entries.iter().filter(|e| e.success).count(),
            pairs: inner.pairs.len(),
        }
    }

    /// Stores `entry`; for a successful entry, mints one pair per failed
    /// trial that was followed by different code. All embedding and
    /// summarization calls happen before anything is committed.
    pub fn insert_trace(
        &self,
        mut entry: KnowledgeEntry,
        gateway: &Gateway,
        steps: FixStepSource,
    ) -> Result<Vec<ErrorFixPair>, KbError> {
        entry.validate()?;
        let mut drafts = Vec::new();
        if entry.success {
            if entry.description_embedding.is_none() && !entry.task_description.is_empty() {
                entry.description_embedding = Some(gateway.embed(&entry.task_description)?);
            }
            for w in entry.trace.windows(2) {
                let (prev, next) = (&w[0], &w[1]);
                if !prev.feedback.is_failure() || prev.code == next.code {
                    continue;
                }
                let error_text = prev.feedback.primary_message();
                let error_embedding = gateway.embed(&error_text)?;
                let fix_steps = match steps {
                    FixStepSource::Diff => diff_steps(&prev.code, &next.code),
                    FixStepSource::Llm => llm_steps(&error_text, &prev.code, &next.code, gateway)?,
                };
                drafts.push(ErrorFixPair {
                    pair_id: String::new(),
                    error_text,
                    failing_code: prev.code.clone(),
                    fixed_code: next.code.clone(),
                    fix_steps,
                    error_embedding,
                    source_entry: String::new(),
                });
            }
        }
        let mut inner = self.write();
        entry.entry_id = format!("e{:06}", inner.entries.len());
        let base = inner.pairs.len();
        for (i, p) in drafts.iter_mut().enumerate() {
            p.pair_id = format!("p{:06}", base + i);
            p.source_entry = entry.entry_id.clone();
        }
        let mut records = vec![Record::Entry(entry.clone())];
        records.extend(drafts.iter().cloned().map(Record::Pair));
        inner.append(&records)?;
        inner.entries.push(entry);
        inner.pairs.extend(drafts.iter().cloned());
        Ok(drafts)
    }

    /// Pairs whose error embedding is within `min_sim` of the query's,
    /// best first.
    pub fn query_by_feedback(
        &self,
        error_text: &str,
        top_n: usize,
        min_sim: f64,
        gateway: &Gateway,
    ) -> Result<Vec<RetrievalHit>, KbError> {
        if error_text.is_empty() {
            return Err(KbError::EmptyQuery);
        }
        if top_n == 0 || self.read().pairs.is_empty() {
            return Ok(Vec::new());
        }
        let query = gateway.embed(error_text)?;
        let inner = self.read();
        let mut best: Vec<(f64, &ErrorFixPair)> = Vec::with_capacity(top_n + 1);
        for pair in &inner.pairs {
            let sim = query.cosine(&pair.error_embedding);
            if sim < min_sim {
                continue;
            }
            let pos = best.partition_point(|(s, p)| hit_order(*s, &p.pair_id, sim, &pair.pair_id) == Ordering::Less);
            if pos < top_n {
                best.insert(pos, (sim, pair));
                best.truncate(top_n);
            }
        }
        Ok(best
            .into_iter()
            .map(|(similarity, pair)| RetrievalHit {
                pair: pair.clone(),
                similarity,
            })
            .collect())
    }

    /// Successful entries ranked by description similarity.
    pub fn query_similar_success(
        &self,
        task_description: &str,
        top_n: usize,
        gateway: &Gateway,
    ) -> Result<Vec<(KnowledgeEntry, f64)>, KbError> {
        let has_candidates = self
            .read()
            .entries
            .iter()
            .any(|e| e.success && e.description_embedding.is_some());
        if top_n == 0 || !has_candidates {
            return Ok(Vec::new());
        }
        if task_description.is_empty() {
            return Err(KbError::EmptyQuery);
        }
        let query = gateway.embed(task_description)?;
        let inner = self.read();
        let mut scored: Vec<(f64, &KnowledgeEntry)> = inner
            .entries
            .iter()
            .filter(|e| e.success)
            .filter_map(|e| e.description_embedding.as_ref().map(|emb| (query.cosine(emb), e)))
            .collect();
        scored.sort_by(|a, b| hit_order(a.0, &a.1.entry_id, b.0, &b.1.entry_id));
        Ok(scored.into_iter().take(top_n).map(|(s, e)| (e.clone(), s)).collect())
    }

    /// Loads expert solutions, one JSON object per line with `task_id`,
    /// `description`, and `code`. Nothing is committed unless every line
    /// parses and embeds.
    pub fn warm_start(&self, seed_file: &Path, gateway: &Gateway) -> Result<usize, KbError> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Seed {
            task_id: TaskId,
            description: String,
            code: String,
        }
        let text = std::fs::read_to_string(seed_file).map_err(io_err(seed_file))?;
        let mut seeds = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |message: String| KbError::Malformed {
                path: seed_file.to_path_buf(),
                line: i + 1,
                message,
            };
            let seed: Seed = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
            if seed.code.is_empty() || seed.description.is_empty() {
                return Err(malformed("empty code or description".into()));
            }
            seeds.push(seed);
        }
        let mut entries = Vec::with_capacity(seeds.len());
        for seed in seeds {
            let embedding = gateway.embed(&seed.description)?;
            let trial = TrialRecord {
                attempt_index: 0,
                code: seed.code.clone(),
                feedback: FeedbackBundle {
                    execution: ExecutionOutcome::new(0, false, String::new(), String::new(), 0.0),
                    format: FormatReport::from_violations(true, vec![]),
                    quantitative: None,
                    critique: None,
                },
            };
            entries.push(KnowledgeEntry {
                entry_id: String::new(),
                task_id: seed.task_id.clone(),
                task_description: seed.description,
                trace: vec![trial],
                final_solution: CandidateSolution {
                    task_id: seed.task_id,
                    code: seed.code,
                    attempt_index: 0,
                    provenance: Provenance::WarmStart,
                },
                success: true,
                created_at: DateTime::<Utc>::UNIX_EPOCH,
                description_embedding: Some(embedding),
            });
        }
        let mut inner = self.write();
        let base = inner.entries.len();
        for (i, e) in entries.iter_mut().enumerate() {
            e.entry_id = format!("e{:06}", base + i);
        }
        let records: Vec<Record> = entries.iter().cloned().map(Record::Entry).collect();
        inner.append(&records)?;
        let n = entries.len();
        inner.entries.extend(entries);
        Ok(n)
    }
}

fn snippet(lines: &[&str]) -> String {
    let joined = lines
        .iter()
        .map(|l| l.trim())
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join(" / ");
    truncate_chars(&joined, STEP_SNIPPET)
}

/// Turns a line diff into short "replace/add/remove" steps.
pub fn diff_steps(failing: &str, fixed: &str) -> Vec<String> {
    let old: Vec<&str> = failing.lines().collect();
    let new: Vec<&str> = fixed.lines().collect();
    let mut steps = Vec::new();
    for op in capture_diff_slices(Algorithm::Myers, &old, &new) {
        let step = match op {
            DiffOp::Equal { .. } => continue,
            DiffOp::Delete { old_index, old_len, .. } => {
                format!("remove `{}`", snippet(&old[old_index..old_index + old_len]))
            }
            DiffOp::Insert { new_index, new_len, .. } => {
                format!("add `{}`", snippet(&new[new_index..new_index + new_len]))
            }
            DiffOp::Replace {
                old_index,
                old_len,
                new_index,
                new_len,
            } => format!(
                "replace `{}` with `{}`",
                snippet(&old[old_index..old_index + old_len]),
                snippet(&new[new_index..new_index + new_len])
            ),
        };
        steps.push(step);
        if steps.len() == MAX_FIX_STEPS {
            break;
        }
    }
    if steps.is_empty() {
        steps.push("whitespace-only change".to_string());
    }
    steps
}

fn llm_steps(error_text: &str, failing: &str, fixed: &str, gateway: &Gateway) -> Result<Vec<String>, KbError> {
    let prompt = format!(
        "An implementation failed with this error:\n{error_text}\n\n## Failing code\n```\n{failing}\n```\n\n\
         ## Fixed code\n```\n{fixed}\n```\n\nSummarize the fix as a short numbered list of steps, one per line."
    );
    let reply = gateway.chat(&gateway.request(vec![
        ChatMessage::new(Role::System, "You summarize code repairs as concise steps."),
        ChatMessage::new(Role::User, prompt),
    ]))?;
    let steps: Vec<String> = reply
        .lines()
        .map(|l| {
            l.trim()
                .trim_start_matches(|c: char| c.is_ascii_digit() || matches!(c, '.' | ')' | '-' | '*'))
                .trim()
                .to_string()
        })
        .filter(|l| !l.is_empty() && !l.starts_with("```"))
        .take(MAX_FIX_STEPS)
        .collect();
    if steps.is_empty() {
        return Ok(diff_steps(failing, fixed));
    }
    Ok(steps)
}
