//! The scheduling agent: asks the model for a dependency DAG and an order,
//! repairs the order against the DAG, and re-ranks tasks as outcomes arrive.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatMessage, Gateway, GatewayError, Role};
use crate::mermaid::{parse_mermaid, render_mermaid, topological_order, TaskDag};
use crate::model::{Difficulty, TaskId, TaskSpec};

pub const DEFAULT_FAILURE_THRESHOLD: u32 = 2;
pub const DEFAULT_RESCHEDULE_PERIOD: u32 = 5;

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("task set is empty")]
    EmptyTaskSet,
    #[error("unknown task id `{0}`")]
    UnknownTask(TaskId),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeSummary {
    pub task_id: TaskId,
    pub attempts_used: u32,
    pub final_success: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_error_digest: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReschedPolicy {
    /// Failure-count demotion only.
    #[default]
    Local,
    /// Demotion plus a fresh model proposal every `reschedule_period` attempts.
    LlmPeriodic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerParams {
    pub failure_threshold: u32,
    pub reschedule_period: u32,
    pub policy: ReschedPolicy,
}

impl Default for SchedulerParams {
    fn default() -> Self {
        Self {
            failure_threshold: DEFAULT_FAILURE_THRESHOLD,
            reschedule_period: DEFAULT_RESCHEDULE_PERIOD,
            policy: ReschedPolicy::Local,
        }
    }
}

/// How an order was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderSource {
    /// The model's list, repaired against its DAG.
    Model,
    /// The model's DAG with the difficulty/id tie-break.
    DagFallback,
    /// No usable DAG: difficulty, then id.
    Heuristic,
    Random,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub remaining: Vec<TaskId>,
    pub completed: BTreeSet<TaskId>,
    pub failed_budget: BTreeMap<TaskId, u32>,
    pub dag: TaskDag,
    pub history: Vec<OutcomeSummary>,
    pub k_limit: usize,
    #[serde(default)]
    pub attempts_since_reschedule: u32,
}

/// Structured scheduler decisions, one JSON line each in the schedule log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ScheduleEvent {
    Proposal {
        source: OrderSource,
        order: Vec<TaskId>,
        mermaid: String,
        warnings: Vec<String>,
    },
    Selection {
        k: usize,
        selected: Vec<TaskId>,
    },
    Round {
        repetition: usize,
        order: Vec<TaskId>,
    },
    Outcome {
        summary: OutcomeSummary,
        remaining: Vec<TaskId>,
    },
    Demotion {
        task_id: TaskId,
        failures: u32,
        remaining: Vec<TaskId>,
    },
}

impl ScheduleState {
    fn new(order: Vec<TaskId>, dag: TaskDag, k_limit: usize) -> Self {
        Self {
            remaining: order,
            completed: BTreeSet::new(),
            failed_budget: BTreeMap::new(),
            dag,
            history: Vec::new(),
            k_limit,
            attempts_since_reschedule: 0,
        }
    }

    pub fn failures(&self, id: &TaskId) -> u32 {
        self.failed_budget.get(id).copied().unwrap_or(0)
    }

    /// Keeps only `ids` in `remaining`, preserving order.
    pub fn restrict_to(&mut self, ids: &[TaskId]) {
        let keep: BTreeSet<&TaskId> = ids.iter().collect();
        self.remaining.retain(|t| keep.contains(t));
    }

    /// Starts another repetition over `scheduled`: completed tasks return to
    /// `remaining`; failures, history, and the DAG carry over.
    pub fn next_round(&mut self, scheduled: &[TaskId], params: &SchedulerParams) {
        let mut order = self.remaining.clone();
        for t in scheduled {
            if !order.contains(t) {
                order.push(t.clone());
            }
        }
        self.remaining = order;
        self.completed.clear();
        self.reorder(params.failure_threshold);
    }

    /// Recomputes `remaining`: tasks at or over the failure threshold sink
    /// behind the rest, subject to DAG ancestry among remaining tasks.
    fn reorder(&mut self, threshold: u32) {
        let pos: HashMap<&TaskId, usize> = self.remaining.iter().enumerate().map(|(i, t)| (t, i)).collect();
        let key = |t: &TaskId| (self.failures(t) >= threshold, pos[t]);
        let sub = self.dag.restrict_transitive(&self.remaining);
        let order = topological_order(&sub, |a, b| key(a).cmp(&key(b))).expect("restricted DAG stays acyclic");
        self.remaining = order;
    }

    /// Whether `remaining` respects every ancestor relation in the DAG.
    pub fn respects_dag(&self) -> bool {
        self.remaining.iter().enumerate().all(|(i, t)| {
            self.remaining[i + 1..].iter().all(|later| {
                !(self.dag.contains(later.as_str())
                    && self.dag.contains(t.as_str())
                    && self.dag.has_path(later, t)
                    && later != t)
            })
        })
    }
}

/// Renders the scheduling conversation. Deterministic in its inputs.
pub fn render_schedule_messages(
    tasks: &[TaskSpec],
    history: &[OutcomeSummary],
) -> Result<Vec<ChatMessage>, SchedulerError> {
    if tasks.is_empty() {
        return Err(SchedulerError::EmptyTaskSet);
    }
    let mut p = String::from("## Candidate tasks\n");
    for t in tasks {
        let _ = write!(
            p,
            "\n### {}\n- name: {}\n- category: {}\n- difficulty: {}\n- description: {}\n",
            t.id,
            t.name,
            t.category.as_token(),
            t.difficulty.as_token(),
            t.description.trim()
        );
    }
    p.push_str("\n## Implementation history\n");
    if history.is_empty() {
        p.push_str("No task has been attempted yet.\n");
    } else {
        let mut per_task: BTreeMap<&TaskId, (u32, u32, u32, Option<&str>)> = BTreeMap::new();
        for h in history {
            let e = per_task.entry(&h.task_id).or_insert((0, 0, 0, None));
            e.0 += h.attempts_used;
            if h.final_success {
                e.1 += 1;
            } else {
                e.2 += 1;
            }
            if let Some(d) = &h.last_error_digest {
                e.3 = Some(d);
            }
        }
        for (id, (attempts, ok, failed, err)) in per_task {
            let _ = write!(p, "- {id}: attempts {attempts}, successes {ok}, failures {failed}");
            if let Some(err) = err {
                let _ = write!(p, ", last error: {err}");
            }
            p.push('\n');
        }
    }
    p.push_str(
        "\n## Instructions\n\
         Think step by step about Task complexity and task dependency before ordering the tasks.\n\
         1. Judge how hard each task is to implement from its description and history.\n\
         2. Decide which tasks teach knowledge (data access patterns, intermediate quantities, \
         error fixes) that makes another task easier. If task A helps task B, draw an edge A --> B.\n\
         3. Output the dependency graph as one fenced ```mermaid block starting with `graph TD`, \
         using the task ids above as node ids and giving a rationale on every edge: `A -->|why A helps B| B`.\n\
         4. Finish with one fenced ```order block listing every task id exactly once, one per line, \
         in the order they should be implemented.\n",
    );
    Ok(vec![
        ChatMessage::new(
            Role::System,
            "You are the scheduling agent of an automated data-development team. You plan the order \
             in which tasks are implemented so that easier tasks and tasks whose knowledge helps others come first.",
        ),
        ChatMessage::new(Role::User, p),
    ])
}

/// The last fenced block that is not a diagram, read as one id per line
/// with list markers stripped.
pub fn parse_order_list(text: &str) -> Option<Vec<String>> {
    let mut blocks: Vec<Vec<&str>> = Vec::new();
    let mut current: Option<Vec<&str>> = None;
    for line in text.lines() {
        if line.trim_start().starts_with("```") {
            match current.take() {
                Some(b) => blocks.push(b),
                None => {
                    let info = line.trim_start().trim_start_matches('`').trim();
                    current = Some(Vec::new());
                    if info.eq_ignore_ascii_case("mermaid") {
                        current.as_mut().expect("just set").push("graph");
                    }
                }
            }
        } else if let Some(b) = current.as_mut() {
            b.push(line);
        }
    }
    let block = blocks.into_iter().rev().find(|b| {
        b.iter()
            .map(|l| l.trim())
            .find(|l| !l.is_empty())
            .is_some_and(|first| !(first.starts_with("graph") || first.starts_with("flowchart")))
    })?;
    let ids: Vec<String> = block
        .iter()
        .map(|l| {
            l.trim()
                .trim_start_matches(|c: char| c.is_ascii_digit() || matches!(c, '.' | ')' | '-' | '*'))
                .trim()
                .trim_matches('`')
                .to_string()
        })
        .filter(|l| !l.is_empty())
        .collect();
    (!ids.is_empty()).then_some(ids)
}

fn by_difficulty<'a>(tasks: &'a [TaskSpec]) -> impl Fn(&TaskId, &TaskId) -> Ordering + 'a {
    let diff: HashMap<&TaskId, Difficulty> = tasks.iter().map(|t| (&t.id, t.difficulty)).collect();
    move |a, b| diff[a].cmp(&diff[b]).then_with(|| a.cmp(b))
}

pub fn heuristic_order(tasks: &[TaskSpec]) -> Vec<TaskId> {
    let dag = TaskDag::with_nodes(tasks.iter().map(|t| t.id.clone()));
    topological_order(&dag, by_difficulty(tasks)).expect("edgeless DAG is acyclic")
}

/// Adopts `list` where the DAG allows; earliest list position wins among
/// ready tasks.
pub fn stable_repair(dag: &TaskDag, list: &[TaskId]) -> Vec<TaskId> {
    let pos: HashMap<&TaskId, usize> = list.iter().enumerate().map(|(i, t)| (t, i)).collect();
    topological_order(dag, |a, b| pos[a].cmp(&pos[b])).expect("TaskDag is acyclic")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub state: ScheduleState,
    pub source: OrderSource,
    pub warnings: Vec<String>,
}

impl Proposal {
    pub fn event(&self) -> ScheduleEvent {
        ScheduleEvent::Proposal {
            source: self.source,
            order: self.state.remaining.clone(),
            mermaid: render_mermaid(&self.state.dag),
            warnings: self.warnings.clone(),
        }
    }
}

/// One chat call: DAG plus ordered list, with the fallbacks for unusable
/// replies.
pub fn propose_schedule(
    tasks: &[TaskSpec],
    history: &[OutcomeSummary],
    gateway: &Gateway,
    k_limit: usize,
) -> Result<Proposal, SchedulerError> {
    let messages = render_schedule_messages(tasks, history)?;
    let reply = gateway.chat(&gateway.request(messages))?;
    Ok(adopt_reply(tasks, &reply, k_limit))
}

/// Interprets a scheduling reply against `tasks`.
pub fn adopt_reply(tasks: &[TaskSpec], reply: &str, k_limit: usize) -> Proposal {
    let ids: BTreeSet<TaskId> = tasks.iter().map(|t| t.id.clone()).collect();
    let mut warnings = Vec::new();
    let parsed = match parse_mermaid(reply) {
        Ok((raw, w)) => {
            warnings.extend(w);
            let mut dag = TaskDag::with_nodes(ids.iter().cloned());
            for n in raw.nodes() {
                if !ids.contains(n) {
                    warnings.push(format!("DAG node `{n}` is not a task id; ignored"));
                }
            }
            for e in raw.edges() {
                if ids.contains(&e.from) && ids.contains(&e.to) {
                    let _ = dag.add_edge(e.from.clone(), e.to.clone(), e.rationale.clone());
                }
            }
            Some(dag)
        }
        Err(e) => {
            warnings.push(format!("{e}; falling back to difficulty order"));
            None
        }
    };
    let (order, dag, source) = match parsed {
        None => (
            heuristic_order(tasks),
            TaskDag::with_nodes(ids.iter().cloned()),
            OrderSource::Heuristic,
        ),
        Some(dag) => {
            let list: Option<Vec<TaskId>> = parse_order_list(reply).map(|l| l.into_iter().map(TaskId::new).collect());
            let is_perm = list.as_ref().is_some_and(|l| {
                l.len() == ids.len() && l.iter().collect::<BTreeSet<_>>() == ids.iter().collect::<BTreeSet<_>>()
            });
            if is_perm {
                let list = list.expect("checked above");
                let repaired = stable_repair(&dag, &list);
                if repaired != list {
                    warnings.push("model order contradicted its DAG; repaired".into());
                }
                (repaired, dag, OrderSource::Model)
            } else {
                warnings.push("ordered list missing or not a permutation of the task ids".into());
                let order = topological_order(&dag, by_difficulty(tasks)).expect("TaskDag is acyclic");
                (order, dag, OrderSource::DagFallback)
            }
        }
    };
    for w in &warnings {
        tracing::warn!(warning = %w, "schedule proposal");
    }
    Proposal {
        state: ScheduleState::new(order, dag, k_limit),
        source,
        warnings,
    }
}

pub fn random_scheduler(tasks: &[TaskSpec], seed: u64, k_limit: usize) -> ScheduleState {
    let mut order: Vec<TaskId> = tasks.iter().map(|t| t.id.clone()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let dag = TaskDag::with_nodes(order.iter().cloned());
    ScheduleState::new(order, dag, k_limit)
}

pub fn fixed_scheduler(tasks: &[TaskSpec], k_limit: usize) -> ScheduleState {
    let order: Vec<TaskId> = tasks.iter().map(|t| t.id.clone()).collect();
    let dag = TaskDag::with_nodes(order.iter().cloned());
    ScheduleState::new(order, dag, k_limit)
}

pub fn select_top_k(state: &ScheduleState, k: usize) -> Vec<TaskId> {
    state.remaining.iter().take(k).cloned().collect()
}

/// Applies one outcome. `tasks` supplies specs for an LLM reschedule.
pub fn update_with_feedback(
    state: &mut ScheduleState,
    summary: OutcomeSummary,
    gateway: Option<&Gateway>,
    tasks: &[TaskSpec],
    params: &SchedulerParams,
) -> Result<Vec<ScheduleEvent>, SchedulerError> {
    let id = summary.task_id.clone();
    if !state.remaining.contains(&id) {
        return Err(SchedulerError::UnknownTask(id));
    }
    let mut events = Vec::new();
    state.history.push(summary.clone());
    state.attempts_since_reschedule += summary.attempts_used;
    if summary.final_success {
        state.remaining.retain(|t| *t != id);
        state.completed.insert(id.clone());
    } else {
        let f = state.failed_budget.entry(id.clone()).or_insert(0);
        *f += 1;
        let failures = *f;
        let before = state.remaining.clone();
        state.reorder(params.failure_threshold);
        if failures >= params.failure_threshold && before != state.remaining {
            events.push(ScheduleEvent::Demotion {
                task_id: id.clone(),
                failures,
                remaining: state.remaining.clone(),
            });
        }
    }
    events.insert(
        0,
        ScheduleEvent::Outcome {
            summary,
            remaining: state.remaining.clone(),
        },
    );
    if params.policy == ReschedPolicy::LlmPeriodic
        && state.attempts_since_reschedule >= params.reschedule_period
        && !state.remaining.is_empty()
    {
        if let Some(gw) = gateway {
            let specs: Vec<TaskSpec> = state
                .remaining
                .iter()
                .filter_map(|r| tasks.iter().find(|t| &t.id == r).cloned())
                .collect();
            let proposal = propose_schedule(&specs, &state.history, gw, state.k_limit)?;
            events.push(proposal.event());
            state.remaining = proposal.state.remaining;
            state.dag = proposal.state.dag;
            state.attempts_since_reschedule = 0;
            state.reorder(params.failure_threshold);
        }
    }
    Ok(events)
}
