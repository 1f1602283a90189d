//! Published per-factor tables and their summary rows, stored under
//! `tests/fixtures/appendix`, plus a synthesizer that turns each printed
//! factor row back into ten per-run feedback bundles.

use std::collections::BTreeMap;
use std::path::Path;

use autodev_core::evaluators::metrics::{aggregate, factor_metrics, AggregateReport, FactorInfo, OVERALL_LABEL};
use autodev_core::model::{
    Difficulty, ExecutionOutcome, FeedbackBundle, FormatReport, FormatRule, FormatViolation, QuantReport, TaskCategory,
    TaskId,
};

pub const WORKFLOW_TABLES: [&str; 6] = [
    "few_shot",
    "cot",
    "reflexion",
    "self_debugging",
    "self_planning",
    "full_method",
];
pub const TOPK_TABLES: [&str; 8] = [
    "random_5",
    "random_10",
    "random_15",
    "random_20",
    "scheduler_5",
    "scheduler_10",
    "scheduler_15",
    "scheduler_20",
];
/// Upper bound when inferring how many runs a table averages.
pub const MAX_RUNS: usize = 30;

#[derive(Debug, Clone)]
pub struct FactorRow {
    pub category: TaskCategory,
    pub difficulty: Difficulty,
    pub name: String,
    pub exec: f64,
    pub format: f64,
    pub corr: Option<f64>,
    pub max: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SummaryRow {
    /// A category label ("Fundamental Avg") or the overall label.
    pub label: String,
    pub values: [f64; 4],
}

pub struct Tables {
    pub factors: BTreeMap<String, Vec<FactorRow>>,
    pub summaries: BTreeMap<String, Vec<SummaryRow>>,
}

fn dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/appendix")
}

fn num(s: &str) -> Option<f64> {
    (s != "NaN").then(|| s.parse().unwrap())
}

pub fn load() -> Tables {
    let category = |s: &str| *TaskCategory::ALL.iter().find(|c| c.label() == s).unwrap();
    let difficulty = |s: &str| {
        *[Difficulty::Easy, Difficulty::Medium, Difficulty::Hard]
            .iter()
            .find(|d| d.label() == s)
            .unwrap()
    };
    let mut factors: BTreeMap<String, Vec<FactorRow>> = BTreeMap::new();
    for line in std::fs::read_to_string(dir().join("factors.csv"))
        .unwrap()
        .lines()
        .skip(1)
    {
        let f: Vec<&str> = line.split(',').collect();
        factors.entry(f[0].to_string()).or_default().push(FactorRow {
            category: category(f[1]),
            difficulty: difficulty(f[2]),
            name: f[3].to_string(),
            exec: f[4].parse().unwrap(),
            format: f[5].parse().unwrap(),
            corr: num(f[6]),
            max: num(f[7]),
        });
    }
    let mut summaries: BTreeMap<String, Vec<SummaryRow>> = BTreeMap::new();
    for line in std::fs::read_to_string(dir().join("rows.csv")).unwrap().lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let label = if f[1] == "overall" {
            OVERALL_LABEL.to_string()
        } else {
            f[1].to_string()
        };
        let v: Vec<f64> = f[2..6].iter().map(|x| x.parse().unwrap()).collect();
        summaries.entry(f[0].to_string()).or_default().push(SummaryRow {
            label,
            values: [v[0], v[1], v[2], v[3]],
        });
    }
    Tables { factors, summaries }
}

fn bundle(exec: bool, format: bool, corr: Option<f64>) -> FeedbackBundle {
    let violations = if format {
        vec![]
    } else {
        vec![FormatViolation {
            rule: if exec { FormatRule::R6 } else { FormatRule::R1 },
            message: "synthetic".into(),
        }]
    };
    FeedbackBundle {
        execution: ExecutionOutcome::new(if exec { 0 } else { 1 }, false, String::new(), String::new(), 0.0),
        format: FormatReport::from_violations(exec, violations),
        quantitative: corr.map(|c| QuantReport {
            correlation: Some(c),
            value_accuracy: 0.0,
            overlap_fraction: 1.0,
            n_aligned: 20,
        }),
        critique: None,
    }
}

/// Smallest run count for which every printed rate in `rows` is a whole
/// number of runs, up to three-decimal rounding.
pub fn runs_for(rows: &[FactorRow]) -> usize {
    let whole = |v: f64, n: usize| (v * n as f64 - (v * n as f64).round()).abs() <= 5e-4 * n as f64 + 1e-9;
    (1..=MAX_RUNS)
        .find(|&n| rows.iter().all(|r| whole(r.exec, n) && whole(r.format, n)))
        .expect("rates fit some run count")
}

/// `runs` bundles whose metrics reproduce `row`: exec and format as counts,
/// correlation from one run (mean equals max) or two runs
/// `{max, 2*mean - max}`, placed on runs that executed.
pub fn synthesize(row: &FactorRow, runs: usize) -> Vec<FeedbackBundle> {
    let n_exec = (row.exec * runs as f64).round() as usize;
    let n_format = (row.format * runs as f64).round() as usize;
    assert!(n_format <= n_exec, "{}: format count exceeds exec count", row.name);
    let corrs: Vec<f64> = match (row.corr, row.max) {
        (Some(avg), Some(max)) if avg == max => vec![avg],
        (Some(avg), Some(max)) => vec![max, 2.0 * avg - max],
        _ => vec![],
    };
    assert!(
        corrs.len() <= n_exec,
        "{}: more correlations than executed runs",
        row.name
    );
    (0..runs)
        .map(|i| bundle(i < n_exec, i < n_format, corrs.get(i).copied()))
        .collect()
}

pub fn reproduce(rows: &[FactorRow]) -> AggregateReport {
    let runs = runs_for(rows);
    let metrics = rows
        .iter()
        .map(|r| {
            let info = FactorInfo {
                task_id: TaskId::new(&r.name),
                name: r.name.clone(),
                category: r.category,
                difficulty: r.difficulty,
            };
            factor_metrics(info, &synthesize(r, runs)).unwrap()
        })
        .collect();
    aggregate(metrics).unwrap()
}

/// Largest absolute gap between reproduced and printed summary values,
/// with the row that has it.
pub fn worst_gap(report: &AggregateReport, printed: &[SummaryRow]) -> (f64, String) {
    let mut worst = (0.0f64, String::new());
    for row in printed {
        let ours = report
            .per_category
            .iter()
            .chain(std::iter::once(&report.overall))
            .find(|r| r.label == row.label)
            .unwrap_or_else(|| panic!("no reproduced row `{}`", row.label));
        for (a, b) in ours.values().iter().zip(row.values) {
            let gap = (a - b).abs();
            if gap > worst.0 {
                worst = (gap, row.label.clone());
            }
        }
    }
    worst
}
