//! `autodev` command-line front end. Data goes to stdout, diagnostics to
//! stderr. Exit status: 0 ok, 1 error, 2 usage error, 3 run finished
//! incomplete.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use autodev_core::evaluators::{parse_output, pearson, DEFAULT_MIN_OVERLAP};
use autodev_core::knowledge::KnowledgeBase;
use autodev_core::mermaid::render_mermaid;
use autodev_core::model::{OutputContract, TaskId};
use autodev_core::orchestrator::{dry_run_schedule, implement_one, regenerate, run, RunConfig};
use autodev_core::toy;
use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(
    name = "autodev",
    version,
    about = "Budgeted scheduling and implementation of data-development tasks"
)]
struct Cli {
    /// Log progress at info level (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment and print the report path.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Start every repetition from an empty knowledge base.
        #[arg(long)]
        fresh_kb_per_rep: bool,
    },
    /// Print the initial order, the Top-K selection, and the DAG.
    Schedule {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required = true)]
        dry_run: bool,
    },
    /// Run the implementation loop for a single task.
    Implement {
        #[arg(long)]
        task: String,
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a candidate output against ground truth.
    Eval {
        #[arg(long)]
        candidate: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MIN_OVERLAP)]
        min_overlap: f64,
    },
    /// Rebuild report tables from a run directory's attempt artifacts.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Inspect a knowledge base.
    Kb {
        #[command(subcommand)]
        command: KbCommand,
    },
    /// Write the toy task set, data, and ground truth into a directory.
    Toy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

#[derive(Args)]
struct KbSource {
    /// Run config; its gateway embeds queries and its kb path is the default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Knowledge base file, overriding the config's.
    #[arg(long)]
    kb: Option<PathBuf>,
}

#[derive(Subcommand)]
enum KbCommand {
    /// Error-fix pairs nearest to an error message, as JSON.
    Query {
        #[arg(long)]
        error: String,
        #[arg(long, default_value_t = 3)]
        top_n: usize,
        #[arg(long, default_value_t = 0.0)]
        min_sim: f64,
        #[command(flatten)]
        source: KbSource,
    },
    /// Entry and pair counts, as JSON.
    Stats {
        #[command(flatten)]
        source: KbSource,
    },
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn kb_path(source: &KbSource, cfg: Option<&RunConfig>) -> Result<PathBuf> {
    match (&source.kb, cfg) {
        (Some(p), _) => Ok(p.clone()),
        (None, Some(cfg)) => Ok(cfg.kb_path()),
        (None, None) => bail!("pass --kb or --config"),
    }
}

fn open_kb(path: &Path) -> Result<KnowledgeBase> {
    if !path.is_file() {
        bail!("knowledge base {} does not exist", path.display());
    }
    KnowledgeBase::load(path).with_context(|| format!("loading {}", path.display()))
}

fn execute(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run {
            config,
            fresh_kb_per_rep,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.kb.fresh_per_rep |= fresh_kb_per_rep;
            let report = run(&cfg)?;
            println!("{}", cfg.run_dir.join("report.json").display());
            let b = &report.budget;
            eprintln!(
                "{} task runs, {} successful; trials {}/{}",
                report.runs.len(),
                report.runs.iter().filter(|r| r.success).count(),
                b.used,
                b.initial
            );
            if let Some(reason) = &report.abort_reason {
                eprintln!("run incomplete: {reason}");
                return Ok(ExitCode::from(3));
            }
        }
        Command::Schedule { config, .. } => {
            let cfg = RunConfig::load(&config)?;
            let (proposal, selected) = dry_run_schedule(&cfg)?;
            for w in &proposal.warnings {
                eprintln!("warning: {w}");
            }
            let ids = |v: &[TaskId]| v.iter().map(TaskId::as_str).collect::<Vec<_>>().join(" ");
            println!("order: {}", ids(&proposal.state.remaining));
            println!("selected: {}", ids(&selected));
            println!("```mermaid\n{}```", render_mermaid(&proposal.state.dag));
        }
        Command::Implement { task, config } => {
            let cfg = RunConfig::load(&config)?;
            let result = implement_one(&cfg, &task)?;
            eprintln!(
                "{}: {} after {} trial(s)",
                result.task_id,
                if result.success { "success" } else { "failure" },
                result.attempts_used
            );
            print_json(&result)?;
        }
        Command::Eval {
            candidate,
            truth,
            min_overlap,
        } => {
            let contract = OutputContract::default();
            let truth_out = parse_output(&truth, &contract);
            let Some(truth_series) = truth_out.series else {
                bail!(
                    "truth {} is not a valid output: {:?}",
                    truth.display(),
                    truth_out.report.violations
                );
            };
            let cand = parse_output(&candidate, &contract);
            for v in &cand.report.violations {
                eprintln!("{:?}: {}", v.rule, v.message);
            }
            let Some(series) = cand.series else {
                bail!("candidate {} could not be scored", candidate.display());
            };
            print_json(&pearson(&series, &truth_series, min_overlap)?)?;
        }
        Command::Report { run_dir } => {
            let report = regenerate(&run_dir)?;
            eprintln!("rebuilt tables from {} task runs", report.runs.len());
            println!("{}", run_dir.join("report.md").display());
        }
        Command::Kb { command } => match command {
            KbCommand::Query {
                error,
                top_n,
                min_sim,
                source,
            } => {
                let Some(config) = &source.config else {
                    bail!("kb query needs --config for its embedding gateway");
                };
                let cfg = RunConfig::load(config)?;
                let kb = open_kb(&kb_path(&source, Some(&cfg))?)?;
                let hits = kb.query_by_feedback(&error, top_n, min_sim, &cfg.gateway()?)?;
                print_json(&hits)?;
            }
            KbCommand::Stats { source } => {
                let cfg = source.config.as_deref().map(RunConfig::load).transpose()?;
                print_json(&open_kb(&kb_path(&source, cfg.as_ref())?)?.stats())?;
            }
        },
        Command::Toy { out, seed } => {
            let tasks = toy::materialize(&out, seed)?;
            eprintln!("wrote {} tasks", tasks.len());
            println!("{}", out.join("tasks.json").display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default = if cli.verbose { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default)))
        .init();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
