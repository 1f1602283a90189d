//! Per-factor metrics over repeated runs, category/overall aggregation, the
//! evolution trajectory, and their table renderings.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Difficulty, FeedbackBundle, TaskCategory, TaskId, TaskResult};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no runs recorded for `{0}`")]
    NoRuns(TaskId),
    #[error("no factors to aggregate")]
    NoFactors,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorInfo {
    pub task_id: TaskId,
    pub name: String,
    pub category: TaskCategory,
    pub difficulty: Difficulty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorMetrics {
    #[serde(flatten)]
    pub info: FactorInfo,
    pub avg_exec: f64,
    pub avg_format: f64,
    pub avg_corr: Option<f64>,
    pub max_corr: Option<f64>,
    pub runs: usize,
}

pub fn factor_metrics(info: FactorInfo, per_run: &[FeedbackBundle]) -> Result<FactorMetrics, MetricsError> {
    if per_run.is_empty() {
        return Err(MetricsError::NoRuns(info.task_id));
    }
    let n = per_run.len() as f64;
    let avg_exec = per_run.iter().filter(|b| b.execution.succeeded).count() as f64 / n;
    let avg_format = per_run.iter().map(|b| f64::from(b.format.score)).sum::<f64>() / n;
    let corrs: Vec<f64> = per_run.iter().filter_map(FeedbackBundle::correlation).collect();
    let avg_corr = (!corrs.is_empty()).then(|| corrs.iter().sum::<f64>() / corrs.len() as f64);
    let max_corr = corrs.iter().copied().reduce(f64::max);
    Ok(FactorMetrics {
        info,
        avg_exec,
        avg_format,
        avg_corr,
        max_corr,
        runs: per_run.len(),
    })
}

/// A row of means with undefined correlations counted as 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub label: String,
    pub factors: usize,
    pub avg_exec: f64,
    pub avg_format: f64,
    pub avg_corr: f64,
    pub max_corr: f64,
}

impl MetricRow {
    fn mean_of(label: String, rows: &[&FactorMetrics]) -> Self {
        let n = rows.len() as f64;
        let mean = |f: &dyn Fn(&FactorMetrics) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
        Self {
            label,
            factors: rows.len(),
            avg_exec: mean(&|r| r.avg_exec),
            avg_format: mean(&|r| r.avg_format),
            avg_corr: mean(&|r| r.avg_corr.unwrap_or(0.0)),
            max_corr: mean(&|r| r.max_corr.unwrap_or(0.0)),
        }
    }

    pub fn values(&self) -> [f64; 4] {
        [self.avg_exec, self.avg_format, self.avg_corr, self.max_corr]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub per_factor: Vec<FactorMetrics>,
    /// Categories present, in canonical category order.
    pub per_category: Vec<MetricRow>,
    /// Mean over all factors (not over category means).
    pub overall: MetricRow,
}

pub const OVERALL_LABEL: &str = "mean value (0 for NaN)";

pub fn aggregate(per_factor: Vec<FactorMetrics>) -> Result<AggregateReport, MetricsError> {
    if per_factor.is_empty() {
        return Err(MetricsError::NoFactors);
    }
    let per_category = TaskCategory::ALL
        .iter()
        .filter_map(|cat| {
            let rows: Vec<&FactorMetrics> = per_factor.iter().filter(|f| f.info.category == *cat).collect();
            (!rows.is_empty()).then(|| MetricRow::mean_of(format!("{} Avg", cat.label()), &rows))
        })
        .collect();
    let all: Vec<&FactorMetrics> = per_factor.iter().collect();
    let overall = MetricRow::mean_of(OVERALL_LABEL.to_string(), &all);
    Ok(AggregateReport {
        per_factor,
        per_category,
        overall,
    })
}

fn fmt3(v: Option<f64>) -> String {
    v.map_or_else(|| "NaN".to_string(), |x| format!("{x:.3}"))
}

fn csv_num(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

impl AggregateReport {
    /// Per-factor rows grouped by category and difficulty, then category
    /// averages and the overall mean.
    pub fn to_markdown(&self) -> String {
        let mut factors: Vec<&FactorMetrics> = self.per_factor.iter().collect();
        factors.sort_by(|a, b| {
            let key = |f: &FactorMetrics| (category_rank(f.info.category), f.info.difficulty);
            key(a).cmp(&key(b)).then_with(|| a.info.task_id.cmp(&b.info.task_id))
        });
        let mut out = String::from(
            "| Category | Difficulty | Factor | avg. exec. | avg. format | avg. corr. | max. corr. |\n\
             |---|---|---|---:|---:|---:|---:|\n",
        );
        for f in factors {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {:.3} | {:.3} | {} | {} |",
                f.info.category.label(),
                f.info.difficulty.label(),
                f.info.name,
                f.avg_exec,
                f.avg_format,
                fmt3(f.avg_corr),
                fmt3(f.max_corr)
            );
        }
        for row in self.per_category.iter().chain(std::iter::once(&self.overall)) {
            let _ = writeln!(
                out,
                "|  |  | {} | {:.3} | {:.3} | {:.3} | {:.3} |",
                row.label, row.avg_exec, row.avg_format, row.avg_corr, row.max_corr
            );
        }
        out
    }

    /// Machine-readable table: one line per factor, category, and overall.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,key,category,difficulty,runs,avg_exec,avg_format,avg_corr,max_corr\n");
        for f in &self.per_factor {
            let _ = writeln!(
                out,
                "factor,{},{},{},{},{},{},{},{}",
                f.info.task_id,
                f.info.category.as_token(),
                f.info.difficulty.as_token(),
                f.runs,
                f.avg_exec,
                f.avg_format,
                csv_num(f.avg_corr),
                csv_num(f.max_corr)
            );
        }
        for row in &self.per_category {
            let _ = writeln!(
                out,
                "category,{},,,{},{},{},{},{}",
                row.label, row.factors, row.avg_exec, row.avg_format, row.avg_corr, row.max_corr
            );
        }
        let o = &self.overall;
        let _ = writeln!(
            out,
            "overall,mean,,,{},{},{},{},{}",
            o.factors, o.avg_exec, o.avg_format, o.avg_corr, o.max_corr
        );
        out
    }
}

fn category_rank(c: TaskCategory) -> usize {
    TaskCategory::ALL.iter().position(|x| *x == c).unwrap_or(usize::MAX)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub success_rate: f64,
    pub mean_corr: f64,
}

/// Cumulative success rate and mean correlation after each result, in
/// completion order.
pub fn evolution_trajectory(results: &[TaskResult]) -> Vec<TrajectoryPoint> {
    let mut successes = 0usize;
    let mut corr_sum = 0.0;
    results
        .iter()
        .enumerate()
        .map(|(i, r)| {
            successes += usize::from(r.success);
            corr_sum += r.best_feedback.correlation().unwrap_or(0.0);
            let n = (i + 1) as f64;
            TrajectoryPoint {
                step: i + 1,
                success_rate: successes as f64 / n,
                mean_corr: corr_sum / n,
            }
        })
        .collect()
}

pub fn trajectory_csv(points: &[TrajectoryPoint]) -> String {
    let mut out = String::from("step,cumulative_success_rate,cumulative_mean_corr\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.step, p.success_rate, p.mean_corr);
    }
    out
}
