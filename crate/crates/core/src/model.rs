//! Shared domain types: tasks, candidate solutions, and the feedback channels
//! produced for every attempt.

use std::borrow::Borrow;
use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of a task within a task set.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(String);

impl TaskId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Task ids double as Mermaid node ids, so they are restricted to
    /// `[A-Za-z0-9_-]`.
    pub fn is_token(&self) -> bool {
        !self.0.is_empty()
            && self
                .0
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Borrow<str> for TaskId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl From<&str> for TaskId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

impl From<String> for TaskId {
    fn from(s: String) -> Self {
        Self(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskCategory {
    Fundamental,
    HighFrequency,
    PriceVolume,
    Other,
}

impl TaskCategory {
    pub const ALL: [TaskCategory; 4] = [
        TaskCategory::Fundamental,
        TaskCategory::HighFrequency,
        TaskCategory::PriceVolume,
        TaskCategory::Other,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TaskCategory::Fundamental => "Fundamental",
            TaskCategory::HighFrequency => "High Frequency",
            TaskCategory::PriceVolume => "Price Volume",
            TaskCategory::Other => "Other",
        }
    }

    pub fn as_token(self) -> &'static str {
        match self {
            TaskCategory::Fundamental => "fundamental",
            TaskCategory::HighFrequency => "high_frequency",
            TaskCategory::PriceVolume => "price_volume",
            TaskCategory::Other => "other",
        }
    }
}

/// Ordered easy < medium < hard; the scheduler's fallback ordering relies on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub fn as_token(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Difficulty::Easy => "Easy",
            Difficulty::Medium => "Medium",
            Difficulty::Hard => "Hard",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSourceDescriptor {
    pub name: String,
    pub path: PathBuf,
    #[serde(default)]
    pub schema_note: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    #[default]
    KeyedSeries,
}

/// Shape of the series every candidate must write.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputContract {
    #[serde(default)]
    pub kind: OutputKind,
    #[serde(default = "default_key_columns")]
    pub key_columns: Vec<String>,
    #[serde(default = "default_value_column")]
    pub value_column: String,
}

fn default_key_columns() -> Vec<String> {
    vec!["datetime".to_string(), "instrument".to_string()]
}

fn default_value_column() -> String {
    "value".to_string()
}

impl Default for OutputContract {
    fn default() -> Self {
        Self {
            kind: OutputKind::KeyedSeries,
            key_columns: default_key_columns(),
            value_column: default_value_column(),
        }
    }
}

impl OutputContract {
    /// The exact header line expected in the output file.
    pub fn header(&self) -> String {
        let mut cols = self.key_columns.clone();
        cols.push(self.value_column.clone());
        cols.join(",")
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.key_columns.is_empty() {
            out.push("output contract has no key columns".to_string());
        }
        let mut seen = HashSet::new();
        for col in &self.key_columns {
            if !seen.insert(col.as_str()) {
                out.push(format!("duplicate key column `{col}`"));
            }
        }
        if self.key_columns.iter().any(|c| c == &self.value_column) {
            out.push(format!("value column `{}` is also a key column", self.value_column));
        }
        out
    }
}

/// Harness-side pointers to the expert solution for a task. Like
/// `implementable`, never rendered into any prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthRef {
    pub output: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: TaskId,
    pub name: String,
    pub category: TaskCategory,
    pub difficulty: Difficulty,
    pub description: String,
    #[serde(default)]
    pub data_sources: Vec<DataSourceDescriptor>,
    #[serde(default)]
    pub output_contract: OutputContract,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub implementable: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruthRef>,
}

impl TaskSpec {
    /// Resolves relative data-source and ground-truth paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for ds in &mut self.data_sources {
            if ds.path.is_relative() && !ds.path.as_os_str().is_empty() {
                ds.path = base.join(&ds.path);
            }
        }
        if let Some(gt) = &mut self.ground_truth {
            if gt.output.is_relative() {
                gt.output = base.join(&gt.output);
            }
            if let Some(code) = &mut gt.code {
                if code.is_relative() {
                    *code = base.join(&*code);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskViolation {
    pub task_id: TaskId,
    pub violation: String,
}

/// Checks every task invariant plus id uniqueness. Violations are data.
pub fn validate_task_set(tasks: &[TaskSpec]) -> Vec<TaskViolation> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    let mut reported_dup = HashSet::new();
    for task in tasks {
        let mut push = |v: String| {
            out.push(TaskViolation {
                task_id: task.id.clone(),
                violation: v,
            })
        };
        if task.id.as_str().is_empty() {
            push("empty id".to_string());
        } else if !task.id.is_token() {
            push(format!("id `{}` is not a token of [A-Za-z0-9_-]", task.id));
        }
        if !seen.insert(task.id.clone()) && reported_dup.insert(task.id.clone()) {
            push(format!("duplicate id `{}`", task.id));
        }
        if task.description.trim().is_empty() {
            push("empty description".to_string());
        }
        for ds in &task.data_sources {
            if ds.path.as_os_str().is_empty() {
                push(format!("data source `{}` has an empty path", ds.name));
            }
        }
        for v in task.output_contract.violations() {
            push(v);
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum TaskSetError {
    #[error("cannot read task set {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed task set {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

/// Loads a task set: a JSON array of task objects. Unknown fields are
/// rejected. Relative paths inside tasks resolve against the file's directory.
pub fn load_task_set(path: &Path) -> Result<Vec<TaskSpec>, TaskSetError> {
    let text = std::fs::read_to_string(path).map_err(|source| TaskSetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut tasks: Vec<TaskSpec> = serde_json::from_str(&text).map_err(|e| TaskSetError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    for t in &mut tasks {
        t.resolve_paths(base);
    }
    Ok(tasks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    LlmDraft,
    LlmRepair,
    WarmStart,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSolution {
    pub task_id: TaskId,
    pub code: String,
    pub attempt_index: u32,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub succeeded: bool,
    pub exit_code: i32,
    pub timed_out: bool,
    pub stdout: String,
    pub stderr: String,
    /// Seconds.
    pub wall_time: f64,
}

impl ExecutionOutcome {
    pub fn new(exit_code: i32, timed_out: bool, stdout: String, stderr: String, wall_time: f64) -> Self {
        Self {
            succeeded: exit_code == 0 && !timed_out,
            exit_code,
            timed_out,
            stdout,
            stderr,
            wall_time,
        }
    }

    /// An attempt that never reached a process (gateway fault, spawn failure).
    pub fn aborted(message: impl Into<String>) -> Self {
        Self::new(-1, false, String::new(), message.into(), 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FormatRule {
    R1,
    R2,
    R3,
    R4,
    R5,
    R6,
    R7,
}

impl FormatRule {
    pub fn describe(self) -> &'static str {
        match self {
            FormatRule::R1 => "output file exists",
            FormatRule::R2 => "header matches the contract exactly",
            FormatRule::R3 => "every row has one field per column",
            FormatRule::R4 => "datetimes parse as ISO-8601",
            FormatRule::R5 => "no duplicate keys",
            FormatRule::R6 => "rows sorted ascending by key",
            FormatRule::R7 => "values are finite decimals or empty",
        }
    }
}

impl fmt::Display for FormatRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatViolation {
    pub rule: FormatRule,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatReport {
    pub parseable: bool,
    pub score: u8,
    pub violations: Vec<FormatViolation>,
}

impl FormatReport {
    pub fn from_violations(parseable: bool, violations: Vec<FormatViolation>) -> Self {
        let score = u8::from(parseable && violations.is_empty());
        Self {
            parseable,
            score,
            violations,
        }
    }

    pub fn has(&self, rule: FormatRule) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    /// `None` is the undefined marker: too little overlap or a constant side.
    pub correlation: Option<f64>,
    pub value_accuracy: f64,
    pub overlap_fraction: f64,
    pub n_aligned: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackBundle {
    pub execution: ExecutionOutcome,
    pub format: FormatReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantitative: Option<QuantReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critique: Option<String>,
}

const ERROR_TEXT_LIMIT: usize = 512;

impl FeedbackBundle {
    /// Execution failed or the output broke the format contract.
    pub fn is_failure(&self) -> bool {
        !self.execution.succeeded || self.format.score == 0
    }

    pub fn correlation(&self) -> Option<f64> {
        self.quantitative.as_ref().and_then(|q| q.correlation)
    }

    /// The single message that keys this attempt in the knowledge base.
    pub fn primary_message(&self) -> String {
        if !self.execution.succeeded {
            if let Some(line) = error_line(&self.execution.stderr) {
                return line;
            }
            if self.execution.timed_out {
                return format!("timed out after {:.1}s", self.execution.wall_time);
            }
            let stderr = self.execution.stderr.trim();
            if !stderr.is_empty() {
                return truncate_chars(stderr, ERROR_TEXT_LIMIT);
            }
            return match runner_exit_meaning(self.execution.exit_code) {
                Some(meaning) => format!("process exited with code {} ({meaning})", self.execution.exit_code),
                None => format!("process exited with code {}", self.execution.exit_code),
            };
        }
        if !self.format.violations.is_empty() {
            let joined = self
                .format
                .violations
                .iter()
                .map(|v| format!("{}: {}", v.rule, v.message))
                .collect::<Vec<_>>()
                .join("; ");
            return truncate_chars(&joined, ERROR_TEXT_LIMIT);
        }
        "ok".to_string()
    }
}

/// Exit codes of the in-sandbox runner harness.
pub fn runner_exit_meaning(code: i32) -> Option<&'static str> {
    match code {
        0 => Some("ok"),
        1 => Some("candidate raised an exception"),
        2 => Some("manifest or data source fault"),
        3 => Some("no `result` variable"),
        4 => Some("`result` has the wrong shape"),
        _ => None,
    }
}

/// Last stderr line that names an error class (`FooError`, `FooException`).
pub fn error_line(stderr: &str) -> Option<String> {
    stderr
        .lines()
        .rev()
        .map(str::trim)
        .find(|line| has_error_class(line))
        .map(|l| truncate_chars(l, ERROR_TEXT_LIMIT))
}

fn has_error_class(line: &str) -> bool {
    line.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .any(|tok| {
            (tok.ends_with("Error") || tok.ends_with("Exception"))
                && tok.chars().next().is_some_and(|c| c.is_ascii_uppercase())
        })
}

pub fn truncate_chars(s: &str, limit: usize) -> String {
    match s.char_indices().nth(limit) {
        Some((idx, _)) => s[..idx].to_string(),
        None => s.to_string(),
    }
}

/// One sandbox execution and its evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub attempt_index: u32,
    pub code: String,
    pub feedback: FeedbackBundle,
}

/// Outcome of one implementation loop over a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: TaskId,
    pub success: bool,
    pub best_feedback: FeedbackBundle,
    pub attempts_used: u32,
    pub trace: Vec<TrialRecord>,
}
