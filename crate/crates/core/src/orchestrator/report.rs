//! The run report and the files rendered from it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::RunConfig;
use crate::evaluators::metrics::{
    aggregate, evolution_trajectory, factor_metrics, trajectory_csv, AggregateReport, FactorInfo, TrajectoryPoint,
};
use crate::implementer::{compare_feedback, AttemptArtifact};
use crate::model::{FeedbackBundle, TaskId, TaskResult};
use crate::scheduler::OrderSource;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";
pub const REPORT_CSV: &str = "report.csv";
pub const TRAJECTORY_CSV: &str = "trajectory.csv";
pub const CONFIG_JSON: &str = "config.json";
pub const SCHEDULE_LOG: &str = "schedule.log.jsonl";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demotion {
    pub task_id: TaskId,
    pub failures: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ScheduleSummary {
    pub source: Option<OrderSource>,
    pub mermaid: String,
    pub order: Vec<TaskId>,
    pub selected: Vec<TaskId>,
    pub warnings: Vec<String>,
    pub demotions: Vec<Demotion>,
    pub reschedules: usize,
}

/// One `run_task` call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seq: u32,
    pub repetition: usize,
    pub task_id: TaskId,
    pub success: bool,
    pub attempts_used: u32,
    pub best_feedback: FeedbackBundle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetAccounting {
    pub initial: u64,
    pub used: u64,
    pub remaining: u64,
    /// Trials recorded across all runs, including an aborted one.
    pub attempts_total: u64,
    pub conserved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub started_at: DateTime<Utc>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort_reason: Option<String>,
    pub config: RunConfig,
    pub schedule: ScheduleSummary,
    pub factors: Vec<FactorInfo>,
    pub runs: Vec<RunRecord>,
    pub unattempted: Vec<TaskId>,
    pub aggregate: Option<AggregateReport>,
    pub trajectory: Vec<TrajectoryPoint>,
    pub budget: BudgetAccounting,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

/// Aggregate, trajectory, and unattempted factors derived from `runs`.
pub fn tables(
    factors: &[FactorInfo],
    runs: &[RunRecord],
) -> (Option<AggregateReport>, Vec<TrajectoryPoint>, Vec<TaskId>) {
    let mut per_task: BTreeMap<&TaskId, Vec<FeedbackBundle>> = BTreeMap::new();
    for r in runs {
        per_task.entry(&r.task_id).or_default().push(r.best_feedback.clone());
    }
    let mut metrics = Vec::new();
    let mut unattempted = Vec::new();
    for f in factors {
        match per_task.get(&f.task_id) {
            Some(bundles) => metrics.push(factor_metrics(f.clone(), bundles).expect("non-empty runs")),
            None => unattempted.push(f.task_id.clone()),
        }
    }
    let agg = aggregate(metrics).ok();
    let results: Vec<TaskResult> = runs
        .iter()
        .map(|r| TaskResult {
            task_id: r.task_id.clone(),
            success: r.success,
            best_feedback: r.best_feedback.clone(),
            attempts_used: r.attempts_used,
            trace: Vec::new(),
        })
        .collect();
    (agg, evolution_trajectory(&results), unattempted)
}

impl RunReport {
    /// Strips wall-clock data and run-location paths.
    pub fn normalize(&mut self) {
        self.timing = None;
        self.config.run_dir = PathBuf::from(".");
        self.config.kb.path = None;
        for r in &mut self.runs {
            r.best_feedback.execution.wall_time = 0.0;
        }
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("# Run report\n\n");
        let _ = writeln!(
            out,
            "- status: {}",
            if self.complete { "complete" } else { "incomplete" }
        );
        if let Some(r) = &self.abort_reason {
            let _ = writeln!(out, "- abort reason: {r}");
        }
        let b = &self.budget;
        let _ = writeln!(
            out,
            "- trials: {} used of {} ({} remaining)\n- task runs: {}, successful: {}",
            b.used,
            b.initial,
            b.remaining,
            self.runs.len(),
            self.runs.iter().filter(|r| r.success).count()
        );
        out.push_str("\n## Schedule\n\n");
        if let Some(s) = self.schedule.source {
            let _ = writeln!(
                out,
                "order source: {}\n",
                serde_json::to_value(s).expect("enum").as_str().unwrap_or("")
            );
        }
        let ids = |v: &[TaskId]| v.iter().map(TaskId::as_str).collect::<Vec<_>>().join(", ");
        let _ = writeln!(
            out,
            "order: {}\n\nselected: {}\n",
            ids(&self.schedule.order),
            ids(&self.schedule.selected)
        );
        if !self.schedule.mermaid.is_empty() {
            let _ = writeln!(out, "```mermaid\n{}```\n", self.schedule.mermaid);
        }
        for d in &self.schedule.demotions {
            let _ = writeln!(out, "- demoted `{}` after {} failures", d.task_id, d.failures);
        }
        out.push_str("\n## Results\n\n");
        match &self.aggregate {
            Some(a) => out.push_str(&a.to_markdown()),
            None => out.push_str("No task was attempted.\n"),
        }
        if !self.unattempted.is_empty() {
            let _ = writeln!(out, "\nUnattempted: {}", ids(&self.unattempted));
        }
        out
    }

    /// Writes report.json, report.md, report.csv, and trajectory.csv.
    pub fn write(&self, run_dir: &Path) -> Result<(), ReportError> {
        let json = serde_json::to_string_pretty(self).expect("report serializes") + "\n";
        let p = run_dir.join(REPORT_JSON);
        std::fs::write(&p, json).map_err(io_err(&p))?;
        self.write_tables(run_dir)
    }

    fn write_tables(&self, run_dir: &Path) -> Result<(), ReportError> {
        let csv = self.aggregate.as_ref().map(AggregateReport::to_csv).unwrap_or_default();
        for (name, body) in [
            (REPORT_MD, self.to_markdown()),
            (REPORT_CSV, csv),
            (TRAJECTORY_CSV, trajectory_csv(&self.trajectory)),
        ] {
            let p = run_dir.join(name);
            std::fs::write(&p, body).map_err(io_err(&p))?;
        }
        Ok(())
    }

    pub fn load(run_dir: &Path) -> Result<Self, ReportError> {
        let p = run_dir.join(REPORT_JSON);
        let text = std::fs::read_to_string(&p).map_err(io_err(&p))?;
        serde_json::from_str(&text).map_err(|e| ReportError::Parse {
            path: p,
            message: e.to_string(),
        })
    }
}

fn attempt_artifacts(run_dir: &Path) -> Result<Vec<AttemptArtifact>, ReportError> {
    let mut out = Vec::new();
    let rd = std::fs::read_dir(run_dir).map_err(io_err(run_dir))?;
    let mut task_dirs: Vec<PathBuf> = rd
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    task_dirs.sort();
    for dir in task_dirs {
        let rd = std::fs::read_dir(&dir).map_err(io_err(&dir))?;
        for e in rd.filter_map(Result::ok) {
            let is_attempt = e.file_name().to_string_lossy().starts_with("attempt_");
            let p = e.path().join("feedback.json");
            if !is_attempt || !p.is_file() {
                continue;
            }
            let text = std::fs::read_to_string(&p).map_err(io_err(&p))?;
            out.push(serde_json::from_str(&text).map_err(|e| ReportError::Parse {
                path: p.clone(),
                message: e.to_string(),
            })?);
        }
    }
    Ok(out)
}

/// Rebuilds the tables from per-attempt artifacts and rewrites report.md,
/// report.csv, and trajectory.csv. report.json supplies factor metadata.
pub fn regenerate(run_dir: &Path) -> Result<RunReport, ReportError> {
    let mut report = RunReport::load(run_dir)?;
    let mode = report.config.feedback.mode;
    let corr = report.config.feedback.success_corr;
    let repetition: BTreeMap<u32, usize> = report.runs.iter().map(|r| (r.seq, r.repetition)).collect();
    let mut by_run: BTreeMap<u32, Vec<AttemptArtifact>> = BTreeMap::new();
    for a in attempt_artifacts(run_dir)? {
        by_run.entry(a.run).or_default().push(a);
    }
    report.runs = by_run
        .into_iter()
        .map(|(seq, mut attempts)| {
            attempts.sort_by_key(|a| a.attempt_index);
            let mut best = &attempts[0].feedback;
            for a in &attempts[1..] {
                if compare_feedback(&a.feedback, best, mode, corr).is_gt() {
                    best = &a.feedback;
                }
            }
            RunRecord {
                seq,
                repetition: repetition.get(&seq).copied().unwrap_or(0),
                task_id: attempts[0].task_id.clone(),
                success: attempts.iter().any(|a| a.success),
                attempts_used: attempts.len() as u32,
                best_feedback: best.clone(),
            }
        })
        .collect();
    if report.config.normalized_report {
        report.normalize();
    }
    let (agg, traj, unattempted) = tables(&report.factors, &report.runs);
    report.aggregate = agg;
    report.trajectory = traj;
    report.unattempted = unattempted;
    report.write_tables(run_dir)?;
    Ok(report)
}
