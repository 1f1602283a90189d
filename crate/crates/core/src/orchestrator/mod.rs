//! Top-level run loop: schedule, implement, evaluate, learn, report.

pub mod config;
pub mod report;

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{DateTime, Utc};
use thiserror::Error;

pub use config::{ConfigError, RunConfig, SchedulerKind};
pub use report::{regenerate, BudgetAccounting, ReportError, RunRecord, RunReport, ScheduleSummary};

use crate::evaluators::metrics::FactorInfo;
use crate::gateway::{Gateway, GatewayError};
use crate::implementer::{run_task, ArtifactSink, ImplementError, TaskContext};
use crate::knowledge::{KbError, KnowledgeBase};
use crate::model::{load_task_set, truncate_chars, validate_task_set, TaskId, TaskResult, TaskSetError, TaskSpec};
use crate::sandbox::TrialBudget;
use crate::scheduler::{
    fixed_scheduler, propose_schedule, random_scheduler, select_top_k, update_with_feedback, OutcomeSummary, Proposal,
    ScheduleEvent, SchedulerError,
};
use report::{io_err, tables, Demotion, Timing, CONFIG_JSON, REPORT_SCHEMA_VERSION, SCHEDULE_LOG};

const DIGEST_LIMIT: usize = 200;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    TaskSet(#[from] TaskSetError),
    #[error("invalid task set: {0}")]
    InvalidTasks(String),
    #[error("unknown task id `{0}`")]
    UnknownTask(String),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("knowledge base: {0}")]
    Kb(#[from] KbError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Implement(#[from] ImplementError),
}

fn load_tasks(cfg: &RunConfig) -> Result<Vec<TaskSpec>, RunError> {
    let tasks = load_task_set(&cfg.task_set)?;
    if tasks.is_empty() {
        return Err(RunError::InvalidTasks(format!(
            "{} lists no tasks",
            cfg.task_set.display()
        )));
    }
    let violations = validate_task_set(&tasks);
    if !violations.is_empty() {
        let msg = violations
            .iter()
            .map(|v| format!("{}: {}", v.task_id, v.violation))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(RunError::InvalidTasks(msg));
    }
    Ok(tasks)
}

/// Builds the initial schedule. Only the evolving scheduler calls the model.
pub fn initial_schedule(cfg: &RunConfig, tasks: &[TaskSpec], gw: &Gateway) -> Result<Proposal, GatewayError> {
    let k = cfg.scheduler.k_limit;
    let fixed = |state| Proposal {
        state,
        source: match cfg.scheduler.kind {
            SchedulerKind::Random => crate::scheduler::OrderSource::Random,
            _ => crate::scheduler::OrderSource::Fixed,
        },
        warnings: Vec::new(),
    };
    match cfg.scheduler.kind {
        SchedulerKind::Evolving => match propose_schedule(tasks, &[], gw, k) {
            Ok(p) => Ok(p),
            Err(SchedulerError::Gateway(e)) if matches!(e, GatewayError::ReplayMiss { .. }) => Err(e),
            Err(e) => {
                let mut p = crate::scheduler::adopt_reply(tasks, "", k);
                p.warnings.push(format!("schedule proposal failed: {e}"));
                tracing::warn!(error = %e, "schedule proposal failed; using difficulty order");
                Ok(p)
            }
        },
        SchedulerKind::Random => Ok(fixed(random_scheduler(tasks, cfg.seed, k))),
        SchedulerKind::Fixed => Ok(fixed(fixed_scheduler(tasks, k))),
    }
}

/// The schedule a run would start with, without touching the sandbox or
/// the run directory.
pub fn dry_run_schedule(cfg: &RunConfig) -> Result<(Proposal, Vec<TaskId>), RunError> {
    let tasks = load_tasks(cfg)?;
    let gw = cfg.gateway()?;
    let p = initial_schedule(cfg, &tasks, &gw)?;
    let selected = select_top_k(&p.state, cfg.scheduler.k_limit);
    Ok((p, selected))
}

fn create_dir(p: &Path) -> Result<(), RunError> {
    std::fs::create_dir_all(p).map_err(io_err(p)).map_err(RunError::Report)
}

fn write_config_echo(cfg: &RunConfig) -> Result<(), RunError> {
    let doc = serde_json::json!({ "schema_version": REPORT_SCHEMA_VERSION, "config": cfg });
    let p = cfg.run_dir.join(CONFIG_JSON);
    std::fs::write(
        &p,
        serde_json::to_string_pretty(&doc).expect("config serializes") + "\n",
    )
    .map_err(io_err(&p))?;
    Ok(())
}

fn open_kb(cfg: &RunConfig, gw: &Gateway, fresh: bool) -> Result<KnowledgeBase, RunError> {
    let kb = if fresh {
        KnowledgeBase::in_memory()
    } else {
        KnowledgeBase::open(&cfg.kb_path())?
    };
    if let Some(seed) = &cfg.kb.warm_start {
        let n = kb.warm_start(seed, gw)?;
        tracing::info!(entries = n, "knowledge base warm-started");
    }
    Ok(kb)
}

struct ScheduleLog {
    path: PathBuf,
    file: std::fs::File,
}

impl ScheduleLog {
    fn create(path: PathBuf) -> Result<Self, RunError> {
        let file = std::fs::File::create(&path).map_err(io_err(&path))?;
        Ok(Self { path, file })
    }

    fn log(&mut self, ev: &ScheduleEvent) -> Result<(), RunError> {
        let line = serde_json::to_string(ev).expect("event serializes");
        writeln!(self.file, "{line}").map_err(io_err(&self.path))?;
        Ok(())
    }
}

fn summary_of(r: &TaskResult) -> OutcomeSummary {
    OutcomeSummary {
        task_id: r.task_id.clone(),
        attempts_used: r.attempts_used,
        final_success: r.success,
        last_error_digest: (!r.success)
            .then(|| {
                r.trace
                    .last()
                    .map(|t| truncate_chars(&t.feedback.primary_message(), DIGEST_LIMIT))
            })
            .flatten(),
    }
}

/// Runs the configured experiment and writes every run-directory artifact.
/// Faults after setup yield a report flagged incomplete rather than an
/// error.
pub fn run(cfg: &RunConfig) -> Result<RunReport, RunError> {
    cfg.validate()?;
    let tasks = load_tasks(cfg)?;
    let gw = cfg.gateway()?;
    let started_at = Utc::now();
    let clock = Instant::now();

    create_dir(&cfg.run_dir)?;
    write_config_echo(cfg)?;
    let mut log = ScheduleLog::create(cfg.run_dir.join(SCHEDULE_LOG))?;
    let mut kb = open_kb(cfg, &gw, cfg.kb.fresh_per_rep)?;
    let sandbox = cfg.sandbox_config();
    let icfg = cfg.implementer_config();
    let params = cfg.scheduler_params();
    let budget = TrialBudget::new(cfg.budget.trials);
    if cfg.budget.trials > 0 && (cfg.budget.trials as u128) < cfg.scheduler.k_limit.min(tasks.len()) as u128 {
        tracing::warn!(trials = cfg.budget.trials, "fewer trials than scheduled tasks");
    }

    let mut summary = ScheduleSummary::default();
    let mut runs: Vec<RunRecord> = Vec::new();
    let mut attempts_total: u64 = 0;
    let mut abort: Option<String> = None;
    let mut selected: Vec<TaskId> = Vec::new();
    let mut factors: Vec<FactorInfo> = Vec::new();

    match initial_schedule(cfg, &tasks, &gw) {
        Err(e) => abort = Some(format!("scheduling: {e}")),
        Ok(proposal) => {
            log.log(&proposal.event())?;
            summary.source = Some(proposal.source);
            summary.mermaid = crate::mermaid::render_mermaid(&proposal.state.dag);
            summary.order = proposal.state.remaining.clone();
            summary.warnings = proposal.warnings.clone();
            let mut state = proposal.state;
            selected = select_top_k(&state, cfg.scheduler.k_limit);
            state.restrict_to(&selected);
            log.log(&ScheduleEvent::Selection {
                k: cfg.scheduler.k_limit.min(tasks.len()),
                selected: selected.clone(),
            })?;
            let specs: Vec<TaskSpec> = selected
                .iter()
                .map(|id| tasks.iter().find(|t| &t.id == id).expect("selected from tasks").clone())
                .collect();
            factors = specs
                .iter()
                .map(|t| FactorInfo {
                    task_id: t.id.clone(),
                    name: t.name.clone(),
                    category: t.category,
                    difficulty: t.difficulty,
                })
                .collect();

            let mut seq = 0u32;
            'reps: for rep in 0..cfg.budget.repetitions {
                if rep > 0 {
                    state.next_round(&selected, &params);
                    if cfg.kb.fresh_per_rep {
                        kb.persist(&cfg.kb_path())?;
                        kb = open_kb(cfg, &gw, true)?;
                    }
                }
                log.log(&ScheduleEvent::Round {
                    repetition: rep,
                    order: state.remaining.clone(),
                })?;
                let mut attempted: BTreeSet<TaskId> = BTreeSet::new();
                while let Some(next) = state.remaining.iter().find(|t| !attempted.contains(*t)).cloned() {
                    if budget.remaining() == 0 {
                        break 'reps;
                    }
                    attempted.insert(next.clone());
                    let task = specs.iter().find(|t| t.id == next).expect("scheduled task has a spec");
                    let ctx = TaskContext {
                        kb: &kb,
                        gateway: &gw,
                        sandbox: &sandbox,
                        budget: &budget,
                        config: &icfg,
                        artifacts: Some(ArtifactSink {
                            root: cfg.run_dir.clone(),
                            run: seq,
                        }),
                        now: if cfg.normalized_report {
                            DateTime::UNIX_EPOCH
                        } else {
                            Utc::now()
                        },
                    };
                    let result = match run_task(task, &ctx) {
                        Ok(r) => r,
                        Err(ImplementError::NoBudget) => break 'reps,
                        Err(ImplementError::Aborted { source, partial }) => {
                            attempts_total += partial.len() as u64;
                            abort = Some(format!("task `{next}`: {source}"));
                            break 'reps;
                        }
                        Err(e) => {
                            abort = Some(format!("task `{next}`: {e}"));
                            break 'reps;
                        }
                    };
                    attempts_total += u64::from(result.attempts_used);
                    runs.push(RunRecord {
                        seq,
                        repetition: rep,
                        task_id: result.task_id.clone(),
                        success: result.success,
                        attempts_used: result.attempts_used,
                        best_feedback: result.best_feedback.clone(),
                    });
                    seq += 1;
                    match update_with_feedback(&mut state, summary_of(&result), Some(&gw), &specs, &params) {
                        Ok(events) => {
                            for ev in &events {
                                match ev {
                                    ScheduleEvent::Demotion { task_id, failures, .. } => {
                                        summary.demotions.push(Demotion {
                                            task_id: task_id.clone(),
                                            failures: *failures,
                                        })
                                    }
                                    ScheduleEvent::Proposal { .. } => summary.reschedules += 1,
                                    _ => {}
                                }
                                log.log(ev)?;
                            }
                        }
                        Err(SchedulerError::Gateway(e)) if matches!(e, GatewayError::ReplayMiss { .. }) => {
                            abort = Some(format!("rescheduling: {e}"));
                            break 'reps;
                        }
                        Err(e) => tracing::warn!(error = %e, "schedule update failed"),
                    }
                }
            }
        }
    }
    if cfg.kb.fresh_per_rep {
        kb.persist(&cfg.kb_path())?;
    }

    summary.selected = selected;
    let (aggregate, trajectory, unattempted) = tables(&factors, &runs);
    let used = budget.used();
    let mut report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        complete: abort.is_none(),
        abort_reason: abort,
        config: cfg.clone(),
        schedule: summary,
        factors,
        runs,
        unattempted,
        aggregate,
        trajectory,
        budget: BudgetAccounting {
            initial: budget.initial(),
            used,
            remaining: budget.remaining(),
            attempts_total,
            conserved: attempts_total == used && budget.initial() == used + budget.remaining(),
        },
        timing: Some(Timing {
            started_at,
            wall_seconds: clock.elapsed().as_secs_f64(),
        }),
    };
    if cfg.normalized_report {
        report.normalize();
    }
    report.write(&cfg.run_dir)?;
    Ok(report)
}

/// One implementation loop for `task_id`, outside any schedule.
pub fn implement_one(cfg: &RunConfig, task_id: &str) -> Result<TaskResult, RunError> {
    let tasks = load_tasks(cfg)?;
    let task = tasks
        .iter()
        .find(|t| t.id.as_str() == task_id)
        .ok_or_else(|| RunError::UnknownTask(task_id.to_string()))?;
    let gw = cfg.gateway()?;
    create_dir(&cfg.run_dir)?;
    let kb = open_kb(cfg, &gw, false)?;
    let budget = TrialBudget::new(cfg.budget.trials);
    let sandbox = cfg.sandbox_config();
    let icfg = cfg.implementer_config();
    let ctx = TaskContext {
        kb: &kb,
        gateway: &gw,
        sandbox: &sandbox,
        budget: &budget,
        config: &icfg,
        artifacts: Some(ArtifactSink {
            root: cfg.run_dir.clone(),
            run: 0,
        }),
        now: Utc::now(),
    };
    Ok(run_task(task, &ctx)?)
}
