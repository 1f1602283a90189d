//! Task-dependency DAGs and the Mermaid subset used to exchange them with
//! the scheduling model.
//!
//! Recognized grammar, one statement per line after a `graph TD` /
//! `flowchart TD` header:
//!
//! ```text
//! A            node
//! A[label]     node with a label (label discarded)
//! A --> B      edge
//! A -->|why| B edge with rationale
//! A --> B --> C  chain of edges
//! ```
//!
//! Everything else becomes a warning. Edges are inserted in file order and an
//! edge that would close a cycle is dropped.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::TaskId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MermaidError {
    #[error("no `graph TD` / `flowchart TD` diagram found")]
    NoMermaidHeader,
    #[error("cycle detected among {0:?}")]
    CycleDetected(Vec<TaskId>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DagEdge {
    pub from: TaskId,
    pub to: TaskId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeRejection {
    SelfEdge,
    Duplicate,
    ClosesCycle,
}

/// Acyclic dependency graph over task ids. Every mutation preserves
/// acyclicity, so a `TaskDag` is valid by construction.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TaskDag {
    nodes: BTreeSet<TaskId>,
    edges: Vec<DagEdge>,
}

impl TaskDag {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_nodes<I: IntoIterator<Item = TaskId>>(nodes: I) -> Self {
        Self {
            nodes: nodes.into_iter().collect(),
            edges: Vec::new(),
        }
    }

    pub fn nodes(&self) -> &BTreeSet<TaskId> {
        &self.nodes
    }

    pub fn edges(&self) -> &[DagEdge] {
        &self.edges
    }

    pub fn add_node(&mut self, id: TaskId) {
        self.nodes.insert(id);
    }

    pub fn contains(&self, id: &str) -> bool {
        self.nodes.contains(id)
    }

    /// Inserts `from -> to`, adding both endpoints as nodes. Rejected edges
    /// leave the edge list untouched (endpoints are still declared).
    pub fn add_edge(&mut self, from: TaskId, to: TaskId, rationale: Option<String>) -> Result<(), EdgeRejection> {
        self.nodes.insert(from.clone());
        self.nodes.insert(to.clone());
        if from == to {
            return Err(EdgeRejection::SelfEdge);
        }
        if self.edges.iter().any(|e| e.from == from && e.to == to) {
            return Err(EdgeRejection::Duplicate);
        }
        if self.has_path(&to, &from) {
            return Err(EdgeRejection::ClosesCycle);
        }
        self.edges.push(DagEdge { from, to, rationale });
        Ok(())
    }

    fn successors<'a>(&'a self, id: &'a TaskId) -> impl Iterator<Item = &'a TaskId> + 'a {
        self.edges.iter().filter(move |e| &e.from == id).map(|e| &e.to)
    }

    /// Whether `to` is reachable from `from` (a node reaches itself).
    pub fn has_path(&self, from: &TaskId, to: &TaskId) -> bool {
        let mut stack = vec![from];
        let mut seen = HashSet::new();
        while let Some(n) = stack.pop() {
            if n == to {
                return true;
            }
            if seen.insert(n) {
                stack.extend(self.successors(n));
            }
        }
        false
    }

    /// Proper ancestors of `id`.
    pub fn ancestors(&self, id: &TaskId) -> BTreeSet<TaskId> {
        self.nodes
            .iter()
            .filter(|n| *n != id && self.has_path(n, id))
            .cloned()
            .collect()
    }

    /// Sub-DAG over `keep`, with the edges it inherits from the original
    /// reachability relation (paths through dropped nodes become direct
    /// edges), so orderings of the subset still respect the full DAG.
    pub fn restrict_transitive(&self, keep: &[TaskId]) -> TaskDag {
        let mut out = TaskDag::with_nodes(keep.iter().cloned());
        for u in keep {
            for v in keep {
                if u != v && self.contains(u.as_str()) && self.contains(v.as_str()) && self.has_path(u, v) {
                    let rationale = self
                        .edges
                        .iter()
                        .find(|e| &e.from == u && &e.to == v)
                        .and_then(|e| e.rationale.clone());
                    let _ = out.add_edge(u.clone(), v.clone(), rationale);
                }
            }
        }
        out
    }

    /// Sub-DAG over the nodes in `keep`, dropping edges with a missing
    /// endpoint.
    pub fn restrict(&self, keep: &BTreeSet<TaskId>) -> TaskDag {
        TaskDag {
            nodes: self.nodes.intersection(keep).cloned().collect(),
            edges: self
                .edges
                .iter()
                .filter(|e| keep.contains(&e.from) && keep.contains(&e.to))
                .cloned()
                .collect(),
        }
    }
}

/// Kahn's algorithm; among ready nodes the `tie_break`-minimum goes first.
pub fn topological_order<F>(dag: &TaskDag, tie_break: F) -> Result<Vec<TaskId>, MermaidError>
where
    F: Fn(&TaskId, &TaskId) -> Ordering,
{
    let mut indegree: BTreeMap<&TaskId, usize> = dag.nodes.iter().map(|n| (n, 0)).collect();
    for e in &dag.edges {
        *indegree.entry(&e.to).or_insert(0) += 1;
        indegree.entry(&e.from).or_insert(0);
    }
    let mut ready: Vec<&TaskId> = indegree.iter().filter(|(_, d)| **d == 0).map(|(n, _)| *n).collect();
    let mut order = Vec::with_capacity(indegree.len());
    while !ready.is_empty() {
        let (idx, _) = ready
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| tie_break(a, b))
            .expect("ready is nonempty");
        let node = ready.swap_remove(idx);
        order.push(node.clone());
        for e in dag.edges.iter().filter(|e| &e.from == node) {
            let d = indegree.get_mut(&e.to).expect("edge endpoint indexed");
            *d -= 1;
            if *d == 0 {
                ready.push(&e.to);
            }
        }
    }
    if order.len() != indegree.len() {
        let stuck = indegree
            .into_iter()
            .filter(|(n, _)| !order.contains(n))
            .map(|(n, _)| n.clone())
            .collect();
        return Err(MermaidError::CycleDetected(stuck));
    }
    Ok(order)
}

/// Lexicographic comparator for [`topological_order`].
pub fn lexicographic(a: &TaskId, b: &TaskId) -> Ordering {
    a.cmp(b)
}

/// Renders `dag` in the recognized subset. Rationales have `|` replaced by
/// `/` and line breaks by spaces so they survive re-parsing.
pub fn render_mermaid(dag: &TaskDag) -> String {
    let mut out = String::from("graph TD");
    for n in &dag.nodes {
        out.push_str("\n    ");
        out.push_str(n.as_str());
    }
    for e in &dag.edges {
        out.push_str("\n    ");
        out.push_str(e.from.as_str());
        match &e.rationale {
            Some(r) => {
                let clean: String = r
                    .chars()
                    .map(|c| match c {
                        '|' => '/',
                        '\n' | '\r' => ' ',
                        c => c,
                    })
                    .collect();
                out.push_str(" -->|");
                out.push_str(clean.trim());
                out.push_str("| ");
            }
            None => out.push_str(" --> "),
        }
        out.push_str(e.to.as_str());
    }
    out
}

/// Parses the first recognizable diagram in `text`.
pub fn parse_mermaid(text: &str) -> Result<(TaskDag, Vec<String>), MermaidError> {
    let body = find_diagram(text).ok_or(MermaidError::NoMermaidHeader)?;
    let mut dag = TaskDag::new();
    let mut warnings = Vec::new();
    for (lineno, raw) in body {
        let line = raw.trim().trim_end_matches(';').trim();
        if line.is_empty() || line.starts_with("%%") {
            continue;
        }
        match parse_statement(line) {
            Some(Statement::Node(id)) => dag.add_node(id),
            Some(Statement::Chain(first, hops)) => {
                let mut from = first;
                for (rationale, to) in hops {
                    if let Err(why) = dag.add_edge(from.clone(), to.clone(), rationale) {
                        let reason = match why {
                            EdgeRejection::SelfEdge => "self-edge",
                            EdgeRejection::Duplicate => "duplicate edge",
                            EdgeRejection::ClosesCycle => "edge would close a cycle",
                        };
                        warnings.push(format!("line {lineno}: dropped {from} --> {to}: {reason}"));
                    }
                    from = to;
                }
            }
            None => warnings.push(format!("line {lineno}: unrecognized statement `{line}`")),
        }
    }
    Ok((dag, warnings))
}

fn is_header(line: &str) -> bool {
    let mut parts = line.split_whitespace();
    matches!(parts.next(), Some("graph" | "flowchart"))
        && matches!(parts.next().map(|d| d.trim_end_matches(';')), Some("TD" | "TB"))
}

fn is_meaningful(line: &str) -> bool {
    let t = line.trim();
    !t.is_empty() && !t.starts_with("%%")
}

/// Numbered body lines (after the header) of the first fenced block whose
/// first meaningful line is a header; failing that, the lines following the
/// first header found outside any fence.
fn find_diagram(text: &str) -> Option<Vec<(usize, &str)>> {
    let lines: Vec<(usize, &str)> = text.lines().enumerate().map(|(i, l)| (i + 1, l)).collect();
    let mut blocks: Vec<&[(usize, &str)]> = Vec::new();
    let mut outside: Vec<(usize, &str)> = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if lines[i].1.trim_start().starts_with("```") {
            let start = i + 1;
            let mut end = start;
            while end < lines.len() && !lines[end].1.trim_start().starts_with("```") {
                end += 1;
            }
            blocks.push(&lines[start..end]);
            i = end + 1;
        } else {
            outside.push(lines[i]);
            i += 1;
        }
    }
    for block in blocks {
        let mut meaningful = block.iter().enumerate().filter(|(_, (_, l))| is_meaningful(l));
        if let Some((idx, (_, first))) = meaningful.next() {
            if is_header(first.trim()) {
                return Some(block[idx + 1..].to_vec());
            }
        }
    }
    let pos = outside.iter().position(|(_, l)| is_header(l.trim()))?;
    Some(outside[pos + 1..].to_vec())
}

enum Statement {
    Node(TaskId),
    Chain(TaskId, Vec<(Option<String>, TaskId)>),
}

struct Cursor<'a> {
    s: &'a str,
}

impl<'a> Cursor<'a> {
    fn skip_ws(&mut self) {
        self.s = self.s.trim_start();
    }

    fn eat(&mut self, prefix: &str) -> bool {
        match self.s.strip_prefix(prefix) {
            Some(rest) => {
                self.s = rest;
                true
            }
            None => false,
        }
    }

    fn node(&mut self) -> Option<TaskId> {
        let mut end = 0;
        for (i, c) in self.s.char_indices() {
            let rest = &self.s[i..];
            if rest.starts_with("-->") || rest.starts_with("---") {
                break;
            }
            if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                end = i + c.len_utf8();
            } else {
                break;
            }
        }
        if end == 0 {
            return None;
        }
        let id = TaskId::new(&self.s[..end]);
        self.s = &self.s[end..];
        if self.s.starts_with('[') {
            let close = self.s.find(']')?;
            self.s = &self.s[close + 1..];
        }
        Some(id)
    }

    fn label(&mut self) -> Option<Option<String>> {
        if !self.eat("|") {
            return Some(None);
        }
        let close = self.s.find('|')?;
        let text = self.s[..close].trim().to_string();
        self.s = &self.s[close + 1..];
        Some((!text.is_empty()).then_some(text))
    }
}

fn parse_statement(line: &str) -> Option<Statement> {
    let mut c = Cursor { s: line };
    let first = c.node()?;
    c.skip_ws();
    if c.s.is_empty() {
        return Some(Statement::Node(first));
    }
    let mut hops = Vec::new();
    while !c.s.is_empty() {
        if !c.eat("-->") {
            return None;
        }
        c.skip_ws();
        let rationale = c.label()?;
        c.skip_ws();
        let to = c.node()?;
        c.skip_ws();
        hops.push((rationale, to));
    }
    Some(Statement::Chain(first, hops))
}
