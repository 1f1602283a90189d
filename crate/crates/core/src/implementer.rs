//! The implementation agent: retrieval-augmented prompting, sandbox
//! execution, and evaluation in a per-task repair loop.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluators::{evaluate, parse_output, self_critique, supervised_diff_critique, KeyedSeries};
use crate::gateway::{ChatMessage, Gateway, GatewayError, Role};
use crate::knowledge::{
    FixStepSource, KbError, KnowledgeBase, KnowledgeEntry, RetrievalHit, DEFAULT_MIN_SIM, DEFAULT_TOP_N_FIXES,
    DEFAULT_TOP_N_SIMILAR,
};
use crate::model::{ExecutionOutcome, FeedbackBundle, OutputContract, TaskId, TaskResult, TaskSpec, TrialRecord};
use crate::sandbox::{execute, SandboxConfig, SandboxError, TrialBudget};

pub const DEFAULT_MAX_ITERS: u32 = 5;
pub const DEFAULT_SUCCESS_CORR: f64 = 0.99;
pub const ARTIFACT_SCHEMA_VERSION: u32 = 1;
/// Code recorded for attempts where no candidate reached the sandbox.
pub const NO_CANDIDATE_PREFIX: &str = "<no candidate produced: ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackMode {
    Supervised,
    #[default]
    Unsupervised,
}

#[derive(Debug, Error)]
pub enum ImplementError {
    #[error("global trial budget is exhausted")]
    NoBudget,
    #[error("LLM output is empty")]
    EmptyOutput,
    /// A replay transcript lacks a request; the run cannot continue
    /// deterministically. `partial` holds the trials already executed.
    #[error("aborted: {source}")]
    Aborted {
        source: GatewayError,
        partial: Vec<TrialRecord>,
    },
    #[error("ground truth for `{0}` does not parse")]
    BadTruth(TaskId),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error("writing attempt artifacts under {path}: {source}")]
    Artifacts { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImplementerConfig {
    pub max_iters_per_task: u32,
    pub mode: FeedbackMode,
    pub success_corr: f64,
    pub top_n_fixes: usize,
    pub top_n_similar: usize,
    pub min_sim: f64,
    /// One extra chat call per failed attempt.
    pub critique: bool,
    pub fix_steps: FixStepSource,
}

impl Default for ImplementerConfig {
    fn default() -> Self {
        Self {
            max_iters_per_task: DEFAULT_MAX_ITERS,
            mode: FeedbackMode::Unsupervised,
            success_corr: DEFAULT_SUCCESS_CORR,
            top_n_fixes: DEFAULT_TOP_N_FIXES,
            top_n_similar: DEFAULT_TOP_N_SIMILAR,
            min_sim: DEFAULT_MIN_SIM,
            critique: false,
            fix_steps: FixStepSource::Diff,
        }
    }
}

pub fn success_predicate(feedback: &FeedbackBundle, mode: FeedbackMode, success_corr: f64) -> bool {
    let base = feedback.execution.succeeded && feedback.format.score == 1;
    match mode {
        FeedbackMode::Unsupervised => base,
        FeedbackMode::Supervised => base && feedback.correlation().is_some_and(|c| c >= success_corr),
    }
}

/// Lexicographic (success, correlation, format, execution); an undefined
/// correlation ranks below every defined one.
pub fn compare_feedback(a: &FeedbackBundle, b: &FeedbackBundle, mode: FeedbackMode, success_corr: f64) -> Ordering {
    let corr = |f: &FeedbackBundle| f.correlation();
    success_predicate(a, mode, success_corr)
        .cmp(&success_predicate(b, mode, success_corr))
        .then_with(|| match (corr(a), corr(b)) {
            (Some(x), Some(y)) => x.total_cmp(&y),
            (x, y) => x.is_some().cmp(&y.is_some()),
        })
        .then_with(|| a.format.score.cmp(&b.format.score))
        .then_with(|| a.execution.succeeded.cmp(&b.execution.succeeded))
}

fn fenced(out: &mut String, code: &str) {
    out.push_str("```\n");
    out.push_str(code.trim_end());
    out.push_str("\n```\n");
}

fn feedback_text(out: &mut String, fb: &FeedbackBundle, show_quant: bool) {
    let e = &fb.execution;
    let _ = writeln!(
        out,
        "- execution: {} (exit code {}{})",
        if e.succeeded { "succeeded" } else { "failed" },
        e.exit_code,
        if e.timed_out { ", timed out" } else { "" }
    );
    if !e.succeeded {
        let _ = writeln!(out, "- error: {}", fb.primary_message());
        let tail: Vec<&str> = e.stderr.lines().rev().take(20).collect();
        if !tail.is_empty() {
            out.push_str("- stderr (last lines):\n");
            fenced(out, &tail.into_iter().rev().collect::<Vec<_>>().join("\n"));
        }
    }
    let _ = writeln!(out, "- output format score: {}", fb.format.score);
    for v in &fb.format.violations {
        let _ = writeln!(out, "  - {}: {}", v.rule, v.message);
    }
    if show_quant {
        if let Some(q) = &fb.quantitative {
            let corr = q.correlation.map_or_else(|| "undefined".into(), |c| format!("{c:?}"));
            let _ = writeln!(
                out,
                "- correlation with ground truth: {corr}; value accuracy: {:?}; key overlap: {:?}",
                q.value_accuracy, q.overlap_fraction
            );
        }
    }
    if let Some(c) = &fb.critique {
        let _ = writeln!(out, "- critique:\n{}", c.trim_end());
    }
}

/// Builds the implementation prompt. Sections always appear in the same
/// order; empty optional sections are omitted.
pub fn render_impl_prompt(
    task: &TaskSpec,
    last_attempt: Option<(&str, &FeedbackBundle)>,
    hits: &[RetrievalHit],
    similar: Option<&KnowledgeEntry>,
    contract: &OutputContract,
    show_quant: bool,
) -> Vec<ChatMessage> {
    let mut p = String::new();
    let _ = write!(
        p,
        "## Task\ntask id: {}\nname: {}\n\n{}\n\n### Data sources\n",
        task.id,
        task.name,
        task.description.trim()
    );
    if task.data_sources.is_empty() {
        p.push_str("(none)\n");
    }
    for ds in &task.data_sources {
        let _ = write!(p, "- `{}`", ds.name);
        if !ds.schema_note.is_empty() {
            let _ = write!(p, ": {}", ds.schema_note.trim());
        }
        p.push('\n');
    }
    let _ = write!(
        p,
        "\n## Output contract\nEach data source is available as a table under its name above, keyed by \
         ({keys}). Assign the final answer to a variable named `result`: a series keyed by ({keys}) with one \
         numeric value per key. It is written as CSV with header `{header}`, rows sorted by key, no duplicate \
         keys, dates as YYYY-MM-DD, and missing values left empty.\n",
        keys = contract.key_columns.join(", "),
        header = contract.header(),
    );
    if let Some(entry) = similar {
        let _ = writeln!(
            p,
            "\n## Similar correct implementation\nFrom task `{}`: {}",
            entry.task_id,
            entry.task_description.trim()
        );
        fenced(&mut p, &entry.final_solution.code);
    }
    if !hits.is_empty() {
        p.push_str("\n## Retrieved error fixes\n");
        for (i, h) in hits.iter().enumerate() {
            let _ = writeln!(
                p,
                "\n### Fix {} (similarity {:.3})\nerror: {}",
                i + 1,
                h.similarity,
                h.pair.error_text
            );
            if !h.pair.fix_steps.is_empty() {
                p.push_str("steps:\n");
                for s in &h.pair.fix_steps {
                    let _ = writeln!(p, "- {s}");
                }
            }
            p.push_str("failing code:\n");
            fenced(&mut p, &h.pair.failing_code);
            p.push_str("fixed code:\n");
            fenced(&mut p, &h.pair.fixed_code);
        }
    }
    if let Some((code, fb)) = last_attempt {
        p.push_str("\n## Latest attempt\n");
        fenced(&mut p, code);
        p.push_str("feedback:\n");
        feedback_text(&mut p, fb, show_quant);
    }
    p.push_str(
        "\n## Instructions\nWrite the complete implementation. Reply with exactly one fenced code block \
         and nothing else inside fences.\n",
    );
    vec![
        ChatMessage::new(
            Role::System,
            "You are the implementation agent of an automated data-development team. You write code that \
             computes the requested quantity from the given data sources.",
        ),
        ChatMessage::new(Role::User, p),
    ]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractedCode {
    pub code: String,
    /// No fence was found; the whole reply was taken.
    pub unfenced: bool,
}

pub fn extract_code(llm_output: &str) -> Result<ExtractedCode, ImplementError> {
    let mut lines = llm_output.lines();
    let mut found = false;
    for line in lines.by_ref() {
        if line.trim_start().starts_with("```") {
            found = true;
            break;
        }
    }
    if found {
        let body: Vec<&str> = lines.take_while(|l| !l.trim_start().starts_with("```")).collect();
        let code = body.join("\n");
        if code.trim().is_empty() {
            return Err(ImplementError::EmptyOutput);
        }
        return Ok(ExtractedCode { code, unfenced: false });
    }
    let code = llm_output.trim();
    if code.is_empty() {
        return Err(ImplementError::EmptyOutput);
    }
    Ok(ExtractedCode {
        code: code.to_string(),
        unfenced: true,
    })
}

/// Where per-attempt files go: `<root>/<task>/attempt_<n>/`.
#[derive(Debug, Clone)]
pub struct ArtifactSink {
    pub root: PathBuf,
    /// Sequence number of this `run_task` call within the run.
    pub run: u32,
}

/// The `feedback.json` document of one attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptArtifact {
    pub schema_version: u32,
    pub task_id: TaskId,
    pub run: u32,
    pub attempt_index: u32,
    pub success: bool,
    pub feedback: FeedbackBundle,
}

impl ArtifactSink {
    fn write(
        &self,
        task: &TaskId,
        candidate_filename: &str,
        prompt: &str,
        record: &TrialRecord,
        success: bool,
    ) -> Result<PathBuf, ImplementError> {
        let task_dir = self.root.join(task.as_str());
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| ImplementError::Artifacts { path, source }
        };
        std::fs::create_dir_all(&task_dir).map_err(io(&task_dir))?;
        let mut n = 1u32;
        let dir = loop {
            let d = task_dir.join(format!("attempt_{n}"));
            match std::fs::create_dir(&d) {
                Ok(()) => break d,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => n += 1,
                Err(e) => return Err(io(&d)(e)),
            }
        };
        let doc = AttemptArtifact {
            schema_version: ARTIFACT_SCHEMA_VERSION,
            task_id: task.clone(),
            run: self.run,
            attempt_index: record.attempt_index,
            success,
            feedback: record.feedback.clone(),
        };
        let files: [(&str, &str); 4] = [
            ("prompt.txt", prompt),
            (candidate_filename, &record.code),
            ("stdout.txt", &record.feedback.execution.stdout),
            ("stderr.txt", &record.feedback.execution.stderr),
        ];
        for (name, body) in files {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(io(&p))?;
        }
        let p = dir.join("feedback.json");
        let json = serde_json::to_string_pretty(&doc).expect("artifact serializes");
        std::fs::write(&p, json + "\n").map_err(io(&p))?;
        Ok(dir)
    }
}

/// Everything `run_task` needs besides the task itself.
pub struct TaskContext<'a> {
    pub kb: &'a KnowledgeBase,
    pub gateway: &'a Gateway,
    pub sandbox: &'a SandboxConfig,
    pub budget: &'a TrialBudget,
    pub config: &'a ImplementerConfig,
    pub artifacts: Option<ArtifactSink>,
    /// Timestamp stamped on the knowledge entry.
    pub now: DateTime<Utc>,
}

/// Loads the ground-truth series named by the task, if any.
pub fn load_truth(task: &TaskSpec) -> Result<Option<(KeyedSeries, Option<String>)>, ImplementError> {
    let Some(gt) = &task.ground_truth else {
        return Ok(None);
    };
    let parsed = parse_output(&gt.output, &task.output_contract);
    let series = parsed
        .series
        .filter(|_| parsed.report.parseable)
        .ok_or_else(|| ImplementError::BadTruth(task.id.clone()))?;
    let code = gt.code.as_ref().and_then(|p| std::fs::read_to_string(p).ok());
    Ok(Some((series, code)))
}

fn aborted_feedback(message: String) -> FeedbackBundle {
    FeedbackBundle {
        execution: ExecutionOutcome::aborted(message),
        format: crate::model::FormatReport::from_violations(false, Vec::new()),
        quantitative: None,
        critique: None,
    }
}

/// `Some(fault)` when the error must stop the run.
fn fatal(e: &GatewayError) -> bool {
    matches!(e, GatewayError::ReplayMiss { .. })
}

enum Draft {
    Code(String),
    Fault(String),
}

/// Runs the repair loop for one task until success, the per-task cap, or
/// the global budget stops it, then records the trace in the knowledge base.
pub fn run_task(task: &TaskSpec, ctx: &TaskContext<'_>) -> Result<TaskResult, ImplementError> {
    if ctx.budget.remaining() == 0 {
        return Err(ImplementError::NoBudget);
    }
    let cfg = ctx.config;
    let truth = load_truth(task)?;
    let show_quant = cfg.mode == FeedbackMode::Supervised;
    let mut trace: Vec<TrialRecord> = Vec::new();
    let mut success = false;

    let abort = |source: GatewayError, trace: &[TrialRecord]| ImplementError::Aborted {
        source,
        partial: trace.to_vec(),
    };
    let kb_abort = |e: KbError, trace: &[TrialRecord]| match e {
        KbError::Gateway(g) if fatal(&g) => Err(abort(g, trace)),
        other => {
            tracing::warn!(task = %task.id, error = %other, "knowledge base query failed");
            Ok(Vec::new())
        }
    };

    let similar = match ctx
        .kb
        .query_similar_success(&task.description, cfg.top_n_similar, ctx.gateway)
    {
        Ok(v) => v.into_iter().next().map(|(e, _)| e),
        Err(e) => {
            kb_abort(e, &trace)?;
            None
        }
    };

    for attempt_index in 0..cfg.max_iters_per_task {
        if ctx.budget.remaining() == 0 {
            break;
        }
        let last = trace.last().map(|t| (t.code.as_str(), &t.feedback));
        let hits = match last {
            Some((_, fb)) if fb.is_failure() || !success_predicate(fb, cfg.mode, cfg.success_corr) => {
                match ctx
                    .kb
                    .query_by_feedback(&fb.primary_message(), cfg.top_n_fixes, cfg.min_sim, ctx.gateway)
                {
                    Ok(h) => h,
                    Err(e) => kb_abort(e, &trace)?,
                }
            }
            _ => Vec::new(),
        };
        let messages = render_impl_prompt(task, last, &hits, similar.as_ref(), &task.output_contract, show_quant);
        let prompt_text = messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n\n");

        let draft = match ctx.gateway.chat(&ctx.gateway.request(messages)) {
            Err(e) if fatal(&e) => return Err(abort(e, &trace)),
            Err(e) => Draft::Fault(format!("gateway: {e}")),
            Ok(reply) => match extract_code(&reply) {
                Ok(x) => {
                    if x.unfenced {
                        tracing::warn!(task = %task.id, attempt_index, "reply had no fenced code block");
                    }
                    Draft::Code(x.code)
                }
                Err(e) => Draft::Fault(e.to_string()),
            },
        };

        let (code, mut feedback) = match draft {
            Draft::Fault(msg) => {
                if !ctx.budget.try_consume() {
                    break;
                }
                (format!("{NO_CANDIDATE_PREFIX}{msg}>"), aborted_feedback(msg))
            }
            Draft::Code(code) => match execute(&code, task, ctx.sandbox, ctx.budget) {
                Err(SandboxError::BudgetExhausted) => break,
                Err(e) => {
                    let fb = aborted_feedback(format!("sandbox: {e}"));
                    (code, fb)
                }
                Ok(mut exec) => {
                    let fb = evaluate(
                        exec.outcome.clone(),
                        &exec.output_path,
                        &task.output_contract,
                        truth.as_ref().map(|(s, _)| s),
                    );
                    exec.workdir.cleanup();
                    (code, fb)
                }
            },
        };

        let ok = success_predicate(&feedback, cfg.mode, cfg.success_corr);
        if cfg.critique && !ok && !code.starts_with(NO_CANDIDATE_PREFIX) {
            let critique = match (&cfg.mode, &truth, &feedback.quantitative) {
                (FeedbackMode::Supervised, Some((_, Some(truth_code))), Some(q)) => {
                    supervised_diff_critique(&code, truth_code, q, ctx.gateway)
                }
                _ => self_critique(&code, &feedback, ctx.gateway),
            };
            match critique {
                Ok(c) => feedback.critique = Some(c),
                Err(e) if fatal(&e) => return Err(abort(e, &trace)),
                Err(e) => tracing::warn!(task = %task.id, error = %e, "critique failed"),
            }
        }

        let record = TrialRecord {
            attempt_index,
            code,
            feedback,
        };
        if let Some(sink) = &ctx.artifacts {
            sink.write(&task.id, &ctx.sandbox.candidate_filename, &prompt_text, &record, ok)?;
        }
        trace.push(record);
        if ok {
            success = true;
            break;
        }
    }

    let Some(best) = trace
        .iter()
        .map(|t| &t.feedback)
        .reduce(|best, f| {
            if compare_feedback(f, best, cfg.mode, cfg.success_corr) == Ordering::Greater {
                f
            } else {
                best
            }
        })
        .cloned()
    else {
        return Err(ImplementError::NoBudget);
    };
    let entry = KnowledgeEntry::from_trace(
        task.id.clone(),
        task.description.clone(),
        trace.clone(),
        success,
        ctx.now,
    )?;
    ctx.kb.insert_trace(entry, ctx.gateway, cfg.fix_steps)?;
    Ok(TaskResult {
        task_id: task.id.clone(),
        success,
        best_feedback: best,
        attempts_used: trace.len() as u32,
        trace,
    })
}
