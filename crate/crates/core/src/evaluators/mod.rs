//! Tool-based and supervised evaluation of attempts, plus aggregate metrics.

pub mod critique;
pub mod format;
pub mod metrics;
pub mod pearson;

use std::path::Path;

pub use critique::{self_critique, supervised_diff_critique};
pub use format::{parse_output, parse_output_str, write_series, KeyedSeries, ParsedOutput, SeriesKey};
pub use metrics::{
    aggregate, evolution_trajectory, factor_metrics, trajectory_csv, AggregateReport, FactorInfo, FactorMetrics,
    MetricRow, TrajectoryPoint,
};
pub use pearson::{pearson, DEFAULT_MIN_OVERLAP};

use crate::model::{ExecutionOutcome, FeedbackBundle, OutputContract};

/// Scores one execution. Output is only read when the process succeeded;
/// a quantitative report is attached when ground truth is supplied and the
/// output parsed.
pub fn evaluate(
    execution: ExecutionOutcome,
    output_path: &Path,
    contract: &OutputContract,
    truth: Option<&KeyedSeries>,
) -> FeedbackBundle {
    let parsed = parse_output(output_path, contract);
    let quantitative = match (&parsed.series, truth) {
        (Some(series), Some(truth)) if execution.succeeded => pearson(series, truth, DEFAULT_MIN_OVERLAP).ok(),
        _ => None,
    };
    FeedbackBundle {
        execution,
        format: parsed.report,
        quantitative,
        critique: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FormatRule;

    #[test]
    fn quantitative_needs_success_and_parseable_output() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("output.csv");
        std::fs::write(&out, "datetime,instrument,value\n2024-01-02,A,1.0\n2024-01-02,B,2.0\n").unwrap();
        let truth = parse_output(&out, &OutputContract::default()).series.unwrap();
        let ok = ExecutionOutcome::new(0, false, String::new(), String::new(), 0.1);
        let b = evaluate(ok.clone(), &out, &OutputContract::default(), Some(&truth));
        assert!((b.correlation().unwrap() - 1.0).abs() < 1e-12);
        assert!(!b.is_failure());

        let failed = ExecutionOutcome::new(1, false, String::new(), "boom".into(), 0.1);
        assert!(evaluate(failed, &out, &OutputContract::default(), Some(&truth))
            .quantitative
            .is_none());

        let missing = dir.path().join("nope.csv");
        let b = evaluate(ok, &missing, &OutputContract::default(), Some(&truth));
        assert!(b.format.has(FormatRule::R1) && b.quantitative.is_none() && b.is_failure());
    }
}
