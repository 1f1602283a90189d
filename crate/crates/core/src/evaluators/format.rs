//! The output-file contract: parsing, rule checks R1-R7, and the canonical
//! writer.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime, NaiveTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::model::{FormatReport, FormatRule, FormatViolation, OutputContract};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SeriesKey {
    pub datetime: NaiveDateTime,
    /// Remaining key fields joined by `,` (just the instrument under the
    /// default contract).
    pub instrument: String,
}

impl SeriesKey {
    pub fn new(datetime: NaiveDateTime, instrument: impl Into<String>) -> Self {
        Self {
            datetime,
            instrument: instrument.into(),
        }
    }
}

/// Values keyed by (datetime, instrument); `None` is the missing marker.
pub type KeyedSeries = BTreeMap<SeriesKey, Option<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedOutput {
    pub report: FormatReport,
    /// Present whenever the file is parseable, even if R2 or R6 failed.
    pub series: Option<KeyedSeries>,
}

/// Rules whose failure makes the rows unusable for quantitative scoring.
const STRUCTURAL: [FormatRule; 5] = [
    FormatRule::R1,
    FormatRule::R3,
    FormatRule::R4,
    FormatRule::R5,
    FormatRule::R7,
];

/// Reads and validates `path`. An R1 message names only the file, so
/// feedback does not depend on where the sandbox ran.
pub fn parse_output(path: &Path, contract: &OutputContract) -> ParsedOutput {
    match std::fs::read(path) {
        Ok(bytes) => parse_output_str(&String::from_utf8_lossy(&bytes), contract),
        Err(e) => {
            let v = FormatViolation {
                rule: FormatRule::R1,
                message: format!(
                    "cannot read {}: {}",
                    path.file_name()
                        .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned()),
                    e.kind()
                ),
            };
            ParsedOutput {
                report: FormatReport::from_violations(false, vec![v]),
                series: None,
            }
        }
    }
}

/// Counts failures per rule and keeps the first offending line's message.
#[derive(Default)]
struct Tally {
    first: BTreeMap<FormatRule, String>,
    count: BTreeMap<FormatRule, usize>,
}

impl Tally {
    fn add(&mut self, rule: FormatRule, msg: impl FnOnce() -> String) {
        *self.count.entry(rule).or_insert(0) += 1;
        self.first.entry(rule).or_insert_with(msg);
    }

    fn into_violations(self) -> Vec<FormatViolation> {
        self.first
            .into_iter()
            .map(|(rule, msg)| {
                let n = self.count[&rule];
                let message = if n > 1 {
                    format!("{msg} ({n} rows affected)")
                } else {
                    msg
                };
                FormatViolation { rule, message }
            })
            .collect()
    }
}

pub fn parse_output_str(text: &str, contract: &OutputContract) -> ParsedOutput {
    let mut tally = Tally::default();
    let mut lines = text
        .split('\n')
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .collect::<Vec<_>>();
    if text.ends_with('\n') {
        lines.pop();
    }
    let expected_header = contract.header();
    let mut rows = lines.as_slice();
    match rows.first() {
        Some((_, header)) if *header == expected_header => rows = &rows[1..],
        Some((_, header)) => {
            tally.add(FormatRule::R2, || {
                format!("header is `{header}`, expected `{expected_header}`")
            });
            // A header-like first line is still a header; otherwise treat the
            // line as data so its rows are checked too.
            if parse_datetime(header.split(',').next().unwrap_or("")).is_none() {
                rows = &rows[1..];
            }
        }
        None => tally.add(FormatRule::R2, || "file is empty, header missing".to_string()),
    }

    let width = contract.key_columns.len() + 1;
    let mut series = KeyedSeries::new();
    let mut prev: Option<SeriesKey> = None;
    for (lineno, line) in rows {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            tally.add(FormatRule::R3, || {
                format!("line {lineno}: {} fields, expected {width}", fields.len())
            });
            continue;
        }
        let Some(datetime) = parse_datetime(fields[0]) else {
            tally.add(FormatRule::R4, || {
                format!("line {lineno}: `{}` is not an ISO-8601 date or timestamp", fields[0])
            });
            continue;
        };
        let key = SeriesKey::new(datetime, fields[1..width - 1].join(","));
        let raw = fields[width - 1];
        let value = if raw.is_empty() {
            None
        } else {
            match parse_value(raw) {
                Some(v) => Some(v),
                None => {
                    tally.add(FormatRule::R7, || {
                        format!("line {lineno}: value `{raw}` is not a finite decimal")
                    });
                    continue;
                }
            }
        };
        if series.contains_key(&key) {
            tally.add(FormatRule::R5, || {
                format!("line {lineno}: duplicate key ({}, {})", fields[0], key.instrument)
            });
            continue;
        }
        if prev.as_ref().is_some_and(|p| key < *p) {
            tally.add(FormatRule::R6, || format!("line {lineno}: row out of key order"));
        }
        prev = Some(key.clone());
        series.insert(key, value);
    }

    let violations = tally.into_violations();
    let parseable = !violations.iter().any(|v| STRUCTURAL.contains(&v.rule));
    ParsedOutput {
        report: FormatReport::from_violations(parseable, violations),
        series: parseable.then_some(series),
    }
}

pub fn parse_datetime(s: &str) -> Option<NaiveDateTime> {
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Some(d.and_time(NaiveTime::MIN));
    }
    ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

/// Finite decimal, optionally with an exponent. Rejects `nan`/`inf` spellings.
fn parse_value(s: &str) -> Option<f64> {
    let plain = s
        .bytes()
        .all(|b| b.is_ascii_digit() || matches!(b, b'.' | b'-' | b'+' | b'e' | b'E'));
    if !plain || !s.bytes().any(|b| b.is_ascii_digit()) {
        return None;
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

pub fn format_datetime(dt: &NaiveDateTime) -> String {
    if dt.time() == NaiveTime::MIN {
        dt.format("%Y-%m-%d").to_string()
    } else if dt.nanosecond() == 0 {
        dt.format("%Y-%m-%dT%H:%M:%S").to_string()
    } else {
        dt.format("%Y-%m-%dT%H:%M:%S%.f").to_string()
    }
}

/// Shortest round-trip decimal, always with a fractional part (`11.0`).
pub fn format_value(v: f64) -> String {
    let s = format!("{v}");
    if s.contains('.') {
        s
    } else {
        format!("{s}.0")
    }
}

/// Renders `series` in the canonical contract format.
pub fn write_series(series: &KeyedSeries, contract: &OutputContract) -> String {
    let mut out = contract.header();
    out.push('\n');
    for (key, value) in series {
        let _ = write!(out, "{},{},", format_datetime(&key.datetime), key.instrument);
        if let Some(v) = value {
            out.push_str(&format_value(*v));
        }
        out.push('\n');
    }
    out
}
