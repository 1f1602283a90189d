//! Fixtures shared by the integration tests: a materialized toy workspace,
//! `sh` stand-ins for candidate code, and scripted model replies.
#![allow(dead_code)]

pub mod appendix;

use std::path::{Path, PathBuf};

use autodev_core::gateway::MockScript;
use autodev_core::model::TaskSpec;
use autodev_core::toy;

pub const SCHEDULE_PATTERN: &str = "Task complexity and task dependency";
pub const MULTIINDEX_ERROR: &str = "AttributeError: 'MultiIndex' object has no attribute 'date'";
pub const FIX_SNIPPET: &str = "get_level_values";

pub struct Workspace {
    pub dir: tempfile::TempDir,
    pub tasks: Vec<TaskSpec>,
}

impl Workspace {
    pub fn toy() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let tasks = toy::materialize(dir.path(), 42).unwrap();
        Self { dir, tasks }
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn golden(&self, id: &str) -> PathBuf {
        self.path().join(format!("golden/{id}.csv"))
    }

    /// A candidate that reproduces the reference output exactly.
    pub fn correct(&self, id: &str, note: &str) -> String {
        format!("# {note}\ncp '{}' output.csv", self.golden(id).display())
    }

    /// Writes a mock script next to the tasks and returns its path.
    pub fn mock_script(&self, script: &MockScript) -> PathBuf {
        let p = self.path().join("mock.json");
        std::fs::write(&p, serde_json::to_string_pretty(script).unwrap()).unwrap();
        p
    }

    /// Writes `config.toml` for an `sh` sandbox, with `extra` appended.
    pub fn config(&self, name: &str, run_dir: &str, extra: &str) -> PathBuf {
        let body = format!(
            "task_set = \"tasks.json\"\nrun_dir = \"{run_dir}\"\nnormalized_report = true\n{extra}\n\
             [sandbox]\ninterpreter = [\"sh\"]\ncandidate_filename = \"candidate.sh\"\ntimeout_secs = 30\n"
        );
        let p = self.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    }
}

/// A candidate that dies with the multi-level index attribute error.
pub fn broken(note: &str) -> String {
    format!("# {note}\necho 'Traceback (most recent call last):' >&2\necho \"{MULTIINDEX_ERROR}\" >&2\nexit 1")
}

pub fn reply(code: &str) -> String {
    format!("```sh\n{code}\n```")
}

/// Rule matching the implementation prompt of task `id`.
pub fn task_rule(id: &str) -> String {
    format!("task id: {}\n", regex::escape(id))
}

/// Rule matching a repair prompt (one with a latest attempt) of task `id`.
pub fn repair_rule(id: &str) -> String {
    format!("{}(?s:.*)## Latest attempt", task_rule(id))
}

/// A scheduling reply with the given edges and order.
pub fn schedule_reply(edges: &[(&str, &str)], order: &[&str]) -> String {
    let mut s = String::from("Reasoning about difficulty and transfer.\n```mermaid\ngraph TD\n");
    for (a, b) in edges {
        s.push_str(&format!("    {a} -->|{a} teaches {b}| {b}\n"));
    }
    s.push_str("```\n```order\n");
    for id in order {
        s.push_str(id);
        s.push('\n');
    }
    s.push_str("```\n");
    s
}
