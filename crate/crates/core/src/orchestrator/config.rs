//! Run configuration: one TOML file, `${VAR}` expanded from the
//! environment before parsing. Relative paths resolve against the file's
//! directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{
    Gateway, GatewayMode, HttpBackend, HttpBackendConfig, LlmBackend, MockBackend, MockScript, Transcript,
};
use crate::implementer::{FeedbackMode, ImplementerConfig, DEFAULT_MAX_ITERS, DEFAULT_SUCCESS_CORR};
use crate::knowledge::{FixStepSource, DEFAULT_MIN_SIM, DEFAULT_TOP_N_FIXES, DEFAULT_TOP_N_SIMILAR};
use crate::sandbox::SandboxConfig;
use crate::scheduler::{ReschedPolicy, SchedulerParams, DEFAULT_FAILURE_THRESHOLD, DEFAULT_RESCHEDULE_PERIOD};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("environment variable `{0}` is not set")]
    MissingEnv(String),
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{what} not found: {path}")]
    MissingPath { what: &'static str, path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    #[default]
    Evolving,
    Random,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerSection {
    pub kind: SchedulerKind,
    pub k_limit: usize,
    pub failure_threshold: u32,
    pub reschedule_period: u32,
    pub policy: ReschedPolicy,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        Self {
            kind: SchedulerKind::Evolving,
            k_limit: usize::MAX,
            failure_threshold: DEFAULT_FAILURE_THRESHOLD,
            reschedule_period: DEFAULT_RESCHEDULE_PERIOD,
            policy: ReschedPolicy::Local,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetSection {
    pub repetitions: usize,
    pub max_iters: u32,
    /// Global sandbox executions across the whole run.
    pub trials: u64,
}

impl Default for BudgetSection {
    fn default() -> Self {
        Self {
            repetitions: 10,
            max_iters: DEFAULT_MAX_ITERS,
            trials: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeedbackSection {
    pub mode: FeedbackMode,
    pub success_corr: f64,
    pub critique: bool,
    pub fix_steps: FixStepSource,
}

impl Default for FeedbackSection {
    fn default() -> Self {
        Self {
            mode: FeedbackMode::Unsupervised,
            success_corr: DEFAULT_SUCCESS_CORR,
            critique: false,
            fix_steps: FixStepSource::Diff,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySection {
    pub mode: GatewayMode,
    pub transcript: Option<PathBuf>,
    pub backend: BackendKind,
    pub model: String,
    pub temperature: f64,
    pub endpoint: String,
    pub embedding_model: String,
    /// Name of the variable holding the key, never the key itself.
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
    pub mock_script: Option<PathBuf>,
}

impl Default for GatewaySection {
    fn default() -> Self {
        Self {
            mode: GatewayMode::Live,
            transcript: None,
            backend: BackendKind::Http,
            model: crate::gateway::DEFAULT_MODEL_TAG.into(),
            temperature: 0.0,
            endpoint: "http://localhost:8000/v1".into(),
            embedding_model: "text-embedding-3-small".into(),
            api_key_env: None,
            timeout_secs: 120,
            mock_script: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KbSection {
    /// Defaults to `<run_dir>/kb.jsonl`.
    pub path: Option<PathBuf>,
    pub warm_start: Option<PathBuf>,
    pub fresh_per_rep: bool,
    pub top_n_fixes: usize,
    pub top_n_similar: usize,
    pub min_sim: f64,
}

impl Default for KbSection {
    fn default() -> Self {
        Self {
            path: None,
            warm_start: None,
            fresh_per_rep: false,
            top_n_fixes: DEFAULT_TOP_N_FIXES,
            top_n_similar: DEFAULT_TOP_N_SIMILAR,
            min_sim: DEFAULT_MIN_SIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SandboxSection {
    pub interpreter: Vec<String>,
    pub runner_template: Option<PathBuf>,
    pub timeout_secs: f64,
    pub env_allowlist: Vec<String>,
    pub keep_artifacts: bool,
    pub candidate_filename: String,
    pub scratch_root: Option<PathBuf>,
}

impl Default for SandboxSection {
    fn default() -> Self {
        let d = SandboxConfig::default();
        Self {
            interpreter: d.interpreter,
            runner_template: None,
            timeout_secs: d.timeout.as_secs_f64(),
            env_allowlist: d.env_allowlist,
            keep_artifacts: false,
            candidate_filename: d.candidate_filename,
            scratch_root: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task_set: PathBuf,
    pub run_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Drop timings from report.json so identical runs compare equal.
    #[serde(default)]
    pub normalized_report: bool,
    #[serde(default)]
    pub scheduler: SchedulerSection,
    #[serde(default)]
    pub budget: BudgetSection,
    #[serde(default)]
    pub feedback: FeedbackSection,
    #[serde(default)]
    pub gateway: GatewaySection,
    #[serde(default)]
    pub kb: KbSection,
    #[serde(default)]
    pub sandbox: SandboxSection,
}

/// Replaces every `${NAME}` with the variable's value.
pub fn interpolate_env(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String, ConfigError> {
    let re = Regex::new(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("static pattern");
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for cap in re.captures_iter(text) {
        let m = cap.get(0).expect("whole match");
        let name = &cap[1];
        out.push_str(&text[last..m.start()]);
        out.push_str(&lookup(name).ok_or_else(|| ConfigError::MissingEnv(name.to_string()))?);
        last = m.end();
    }
    out.push_str(&text[last..]);
    Ok(out)
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml(&raw, base).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    pub fn from_toml(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let text = interpolate_env(text, |k| std::env::var(k).ok())?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: PathBuf::new(),
            message: e.to_string(),
        })?;
        rebase(base, &mut cfg.task_set);
        rebase(base, &mut cfg.run_dir);
        for p in [
            cfg.gateway.transcript.as_mut(),
            cfg.gateway.mock_script.as_mut(),
            cfg.kb.path.as_mut(),
            cfg.kb.warm_start.as_mut(),
            cfg.sandbox.runner_template.as_mut(),
            cfg.sandbox.scratch_root.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            rebase(base, p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Value checks plus existence of every input path.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.scheduler.k_limit == 0 {
            return invalid("scheduler.k_limit must be positive");
        }
        if self.budget.max_iters == 0 {
            return invalid("budget.max_iters must be positive");
        }
        if !(self.feedback.success_corr.is_finite() && (-1.0..=1.0).contains(&self.feedback.success_corr)) {
            return invalid("feedback.success_corr must lie in [-1, 1]");
        }
        if !(self.kb.min_sim.is_finite() && (-1.0..=1.0).contains(&self.kb.min_sim)) {
            return invalid("kb.min_sim must lie in [-1, 1]");
        }
        if !(self.sandbox.timeout_secs.is_finite() && self.sandbox.timeout_secs > 0.0) {
            return invalid("sandbox.timeout_secs must be positive");
        }
        if self.gateway.mode != GatewayMode::Live && self.gateway.transcript.is_none() {
            return invalid("gateway.transcript is required outside live mode");
        }
        if self.gateway.backend == BackendKind::Mock && self.gateway.mock_script.is_none() {
            return invalid("gateway.mock_script is required for the mock backend");
        }
        let must_exist = |what: &'static str, p: &Path| {
            if p.exists() {
                Ok(())
            } else {
                Err(ConfigError::MissingPath {
                    what,
                    path: p.to_path_buf(),
                })
            }
        };
        must_exist("task set", &self.task_set)?;
        if self.gateway.mode == GatewayMode::Replay {
            must_exist(
                "replay transcript",
                self.gateway.transcript.as_deref().expect("checked above"),
            )?;
        }
        if let Some(p) = &self.gateway.mock_script {
            must_exist("mock script", p)?;
        }
        if let Some(p) = &self.kb.warm_start {
            must_exist("warm-start seed file", p)?;
        }
        if let Some(p) = &self.sandbox.runner_template {
            must_exist("runner template", p)?;
        }
        self.sandbox_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn kb_path(&self) -> PathBuf {
        self.kb.path.clone().unwrap_or_else(|| self.run_dir.join("kb.jsonl"))
    }

    pub fn sandbox_config(&self) -> SandboxConfig {
        let s = &self.sandbox;
        SandboxConfig {
            interpreter: s.interpreter.clone(),
            runner_template: s.runner_template.clone(),
            timeout: Duration::from_secs_f64(s.timeout_secs),
            env_allowlist: s.env_allowlist.clone(),
            keep_artifacts: s.keep_artifacts,
            candidate_filename: s.candidate_filename.clone(),
            scratch_root: s.scratch_root.clone(),
        }
    }

    pub fn implementer_config(&self) -> ImplementerConfig {
        ImplementerConfig {
            max_iters_per_task: self.budget.max_iters,
            mode: self.feedback.mode,
            success_corr: self.feedback.success_corr,
            top_n_fixes: self.kb.top_n_fixes,
            top_n_similar: self.kb.top_n_similar,
            min_sim: self.kb.min_sim,
            critique: self.feedback.critique,
            fix_steps: self.feedback.fix_steps,
        }
    }

    pub fn scheduler_params(&self) -> SchedulerParams {
        SchedulerParams {
            failure_threshold: self.scheduler.failure_threshold,
            reschedule_period: self.scheduler.reschedule_period,
            policy: self.scheduler.policy,
        }
    }

    /// Builds the gateway. In replay mode no backend is constructed.
    pub fn gateway(&self) -> Result<Gateway, ConfigError> {
        let g = &self.gateway;
        let invalid = |e: crate::gateway::GatewayError| ConfigError::Invalid(e.to_string());
        let backend: Option<Arc<dyn LlmBackend>> = match (g.mode, g.backend) {
            (GatewayMode::Replay, _) => None,
            (_, BackendKind::Mock) => {
                let script = MockScript::load(g.mock_script.as_deref().expect("validated")).map_err(invalid)?;
                Some(Arc::new(MockBackend::new(script).map_err(invalid)?))
            }
            (_, BackendKind::Http) => Some(Arc::new(
                HttpBackend::new(HttpBackendConfig {
                    endpoint: g.endpoint.clone(),
                    embedding_model: g.embedding_model.clone(),
                    timeout: Duration::from_secs(g.timeout_secs),
                    api_key_env: g.api_key_env.clone(),
                })
                .map_err(invalid)?,
            )),
        };
        let gw = match (&g.transcript, backend) {
            (Some(path), backend) if g.mode != GatewayMode::Live => {
                Gateway::with_transcript(Transcript::open(path, g.mode).map_err(invalid)?, backend).map_err(invalid)?
            }
            (_, Some(backend)) => Gateway::live(backend),
            (_, None) => return Err(ConfigError::Invalid("no LLM backend configured".into())),
        };
        Ok(gw.with_model(g.model.clone(), g.temperature))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tasks.json"), "[]").unwrap();
        dir
    }

    #[test]
    fn minimal_config_gets_defaults_and_absolute_paths() {
        let dir = base();
        let cfg = RunConfig::from_toml("task_set = \"tasks.json\"\nrun_dir = \"out\"\n", dir.path()).unwrap();
        assert_eq!(cfg.task_set, dir.path().join("tasks.json"));
        assert_eq!(cfg.kb_path(), dir.path().join("out/kb.jsonl"));
        assert_eq!(cfg.budget.repetitions, 10);
        assert_eq!(cfg.budget.max_iters, 5);
        assert_eq!(cfg.scheduler.failure_threshold, 2);
        assert_eq!(cfg.scheduler.reschedule_period, 5);
        assert_eq!(cfg.feedback.success_corr, 0.99);
        assert_eq!(cfg.sandbox_config(), SandboxConfig::default());
    }

    #[test]
    fn env_interpolation() {
        let env = |k: &str| (k == "MODEL").then(|| "m-1".to_string());
        assert_eq!(
            interpolate_env("model = \"${MODEL}\" $x {y}", env).unwrap(),
            "model = \"m-1\" $x {y}"
        );
        assert!(
            matches!(interpolate_env("${NOPE_NOT_SET}", env), Err(ConfigError::MissingEnv(v)) if v == "NOPE_NOT_SET")
        );
    }

    #[test]
    fn rejects_bad_configs() {
        let dir = base();
        let load = |extra: &str| {
            RunConfig::from_toml(
                &format!("task_set = \"tasks.json\"\nrun_dir = \"o\"\n{extra}"),
                dir.path(),
            )
        };
        assert!(matches!(load("[scheduler]\nk_limit = 0"), Err(ConfigError::Invalid(_))));
        assert!(matches!(
            load("[gateway]\nmode = \"replay\""),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            load("[gateway]\nmode = \"replay\"\ntranscript = \"t.jsonl\""),
            Err(ConfigError::MissingPath {
                what: "replay transcript",
                ..
            })
        ));
        assert!(matches!(load("bogus = 1"), Err(ConfigError::Parse { .. })));
        let missing = RunConfig::from_toml("task_set = \"absent.json\"\nrun_dir = \"o\"", dir.path()).unwrap_err();
        assert!(missing.to_string().contains("absent.json"));
    }
}
