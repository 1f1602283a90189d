//! Runs candidate code in a child process inside a fresh work directory.
//!
//! Each attempt gets its own directory holding `manifest.json`, the
//! candidate file, and (when a runner template is configured) the runner
//! script with the candidate inlined. The child sees only allowlisted
//! environment variables plus `AUTODEV_MANIFEST`, runs in its own process
//! group, and is killed as a group on timeout. Isolation stops there: no
//! namespaces, cgroups, or syscall filtering.

use std::collections::BTreeMap;
use std::io::Read;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ExecutionOutcome, TaskSpec};

pub const MANIFEST_ENV: &str = "AUTODEV_MANIFEST";
pub const OUTPUT_FILENAME: &str = "output.csv";
pub const MANIFEST_FILENAME: &str = "manifest.json";
pub const STREAM_LIMIT: usize = 64 * 1024;
pub const CANDIDATE_PLACEHOLDER: &str = "{{candidate}}";

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("trial budget exhausted")]
    BudgetExhausted,
    #[error("invalid sandbox config: {0}")]
    Config(String),
    #[error("data source `{name}` not found at {path}")]
    MissingDataSource { name: String, path: PathBuf },
    #[error("cannot create work directory: {0}")]
    Workdir(std::io::Error),
    #[error("cannot launch `{program}`: {source}")]
    Spawn { program: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Global cap on sandbox executions, shared across tasks.
#[derive(Debug)]
pub struct TrialBudget {
    initial: u64,
    remaining: AtomicU64,
}

impl TrialBudget {
    pub fn new(trials: u64) -> Self {
        Self {
            initial: trials,
            remaining: AtomicU64::new(trials),
        }
    }

    /// Takes one trial; `false` (and no change) when none are left.
    pub fn try_consume(&self) -> bool {
        self.remaining
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |r| r.checked_sub(1))
            .is_ok()
    }

    pub fn remaining(&self) -> u64 {
        self.remaining.load(Ordering::SeqCst)
    }

    pub fn initial(&self) -> u64 {
        self.initial
    }

    pub fn used(&self) -> u64 {
        self.initial - self.remaining()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxConfig {
    /// argv prefix; the entrypoint path is appended.
    pub interpreter: Vec<String>,
    /// Runner script with `{{candidate}}` where the candidate code goes.
    pub runner_template: Option<PathBuf>,
    pub timeout: Duration,
    pub env_allowlist: Vec<String>,
    pub keep_artifacts: bool,
    pub candidate_filename: String,
    /// Parent for work directories; system temp dir when unset.
    pub scratch_root: Option<PathBuf>,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self {
            interpreter: vec!["python3".into()],
            runner_template: None,
            timeout: Duration::from_secs(60),
            env_allowlist: vec!["PATH".into(), "LANG".into()],
            keep_artifacts: false,
            candidate_filename: "candidate.py".into(),
            scratch_root: None,
        }
    }
}

impl SandboxConfig {
    pub fn validate(&self) -> Result<(), SandboxError> {
        if self.interpreter.is_empty() || self.interpreter[0].is_empty() {
            return Err(SandboxError::Config("interpreter command is empty".into()));
        }
        if self.timeout.is_zero() {
            return Err(SandboxError::Config("timeout must be positive".into()));
        }
        if self.candidate_filename.is_empty() || self.candidate_filename.contains('/') {
            return Err(SandboxError::Config(format!(
                "candidate filename `{}` must be a plain file name",
                self.candidate_filename
            )));
        }
        Ok(())
    }
}

/// The `manifest.json` handed to the runner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub data_sources: BTreeMap<String, PathBuf>,
    pub output_path: PathBuf,
    pub key_columns: Vec<String>,
    pub value_column: String,
}

/// A per-attempt directory, removed by [`Workdir::cleanup`] unless kept.
#[derive(Debug)]
pub struct Workdir {
    path: PathBuf,
    keep: bool,
}

impl Workdir {
    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Idempotent; IO failures are logged, not returned.
    pub fn cleanup(&mut self) {
        if self.keep {
            return;
        }
        match std::fs::remove_dir_all(&self.path) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => tracing::warn!(path = %self.path.display(), error = %e, "workdir cleanup failed"),
        }
    }
}

#[derive(Debug)]
pub struct Execution {
    pub outcome: ExecutionOutcome,
    /// Where the candidate was told to write; may not exist.
    pub output_path: PathBuf,
    pub workdir: Workdir,
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> SandboxError + '_ {
    move |source| SandboxError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Reads a stream to the end, keeping the first `STREAM_LIMIT` bytes.
fn capture<R: Read + Send + 'static>(mut stream: R) -> thread::JoinHandle<String> {
    thread::spawn(move || {
        let mut kept = Vec::new();
        let mut dropped = 0usize;
        let mut buf = [0u8; 8192];
        loop {
            match stream.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = STREAM_LIMIT.saturating_sub(kept.len());
                    kept.extend_from_slice(&buf[..n.min(room)]);
                    dropped += n.saturating_sub(room);
                }
            }
        }
        let mut text = String::from_utf8_lossy(&kept).into_owned();
        if dropped > 0 {
            text.push_str(&format!("\n[truncated {dropped} bytes]"));
        }
        text
    })
}

/// Materializes the attempt and runs it. Consumes exactly one trial from
/// `budget`, even when the launch itself fails.
pub fn execute(
    code: &str,
    task: &TaskSpec,
    cfg: &SandboxConfig,
    budget: &TrialBudget,
) -> Result<Execution, SandboxError> {
    if !budget.try_consume() {
        return Err(SandboxError::BudgetExhausted);
    }
    cfg.validate()?;
    for ds in &task.data_sources {
        if !ds.path.exists() {
            return Err(SandboxError::MissingDataSource {
                name: ds.name.clone(),
                path: ds.path.clone(),
            });
        }
    }
    let tmp = match &cfg.scratch_root {
        Some(root) => {
            std::fs::create_dir_all(root).map_err(SandboxError::Workdir)?;
            tempfile::Builder::new().prefix("attempt-").tempdir_in(root)
        }
        None => tempfile::Builder::new().prefix("autodev-attempt-").tempdir(),
    }
    .map_err(SandboxError::Workdir)?;
    let workdir = Workdir {
        path: absolute(&tmp.keep()),
        keep: cfg.keep_artifacts,
    };
    let dir = workdir.path().to_path_buf();
    let output_path = dir.join(OUTPUT_FILENAME);
    let manifest = Manifest {
        data_sources: task
            .data_sources
            .iter()
            .map(|d| (d.name.clone(), absolute(&d.path)))
            .collect(),
        output_path: output_path.clone(),
        key_columns: task.output_contract.key_columns.clone(),
        value_column: task.output_contract.value_column.clone(),
    };
    let manifest_path = dir.join(MANIFEST_FILENAME);
    let manifest_json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, manifest_json).map_err(io_at(&manifest_path))?;
    let candidate_path = dir.join(&cfg.candidate_filename);
    std::fs::write(&candidate_path, code).map_err(io_at(&candidate_path))?;
    let entrypoint = match &cfg.runner_template {
        Some(template) => {
            let text = std::fs::read_to_string(template).map_err(io_at(template))?;
            let name = match template.extension() {
                Some(ext) => format!("runner.{}", ext.to_string_lossy()),
                None => "runner".to_string(),
            };
            let runner = dir.join(name);
            std::fs::write(&runner, text.replace(CANDIDATE_PLACEHOLDER, code)).map_err(io_at(&runner))?;
            runner
        }
        None => candidate_path,
    };

    let mut cmd = Command::new(&cfg.interpreter[0]);
    cmd.args(&cfg.interpreter[1..])
        .arg(&entrypoint)
        .current_dir(&dir)
        .env_clear()
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);
    for var in &cfg.env_allowlist {
        if let Some(v) = std::env::var_os(var) {
            cmd.env(var, v);
        }
    }
    cmd.env(MANIFEST_ENV, &manifest_path);

    let started = Instant::now();
    let mut child = cmd.spawn().map_err(|source| SandboxError::Spawn {
        program: cfg.interpreter[0].clone(),
        source,
    })?;
    let stdout = capture(child.stdout.take().expect("stdout piped"));
    let stderr = capture(child.stderr.take().expect("stderr piped"));
    let pid = child.id() as libc::pid_t;
    let mut timed_out = false;
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break Some(status),
            Ok(None) if started.elapsed() >= cfg.timeout => {
                timed_out = true;
                // SAFETY: the child leads its own process group (`process_group(0)`).
                unsafe {
                    libc::killpg(pid, libc::SIGKILL);
                }
                break child.wait().ok();
            }
            Ok(None) => thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                tracing::warn!(error = %e, "waiting on candidate process failed");
                unsafe {
                    libc::killpg(pid, libc::SIGKILL);
                }
                break child.wait().ok();
            }
        }
    };
    // Grandchildren that outlived the leader would keep the pipes open.
    unsafe {
        libc::killpg(pid, libc::SIGKILL);
    }
    let wall_time = started.elapsed().as_secs_f64();
    let exit_code = match status {
        Some(s) => s.code().unwrap_or_else(|| 128 + s.signal().unwrap_or(0)),
        None => -1,
    };
    let outcome = ExecutionOutcome::new(
        exit_code,
        timed_out,
        stdout.join().unwrap_or_default(),
        stderr.join().unwrap_or_default(),
        wall_time,
    );
    Ok(Execution {
        outcome,
        output_path,
        workdir,
    })
}
