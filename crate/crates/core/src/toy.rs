//! Synthetic market data (5 trading days x 4 instruments) and three toy
//! factor tasks with reference outputs, for runs without a real benchmark.
//!
//! The factor formulas are stand-ins:
//!
//! * `mid_price` = (bid + ask) / 2
//! * `liquidity_imbalance` = (bid_size - ask_size) / (bid_size + ask_size)
//! * `PB_ROE` = pb / roe

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::{NaiveDate, NaiveTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::evaluators::format::{format_datetime, format_value, write_series, KeyedSeries, SeriesKey};
use crate::model::{DataSourceDescriptor, Difficulty, GroundTruthRef, OutputContract, TaskCategory, TaskId, TaskSpec};

pub const TRADING_DAYS: [(i32, u32, u32); 5] = [(2024, 1, 2), (2024, 1, 3), (2024, 1, 4), (2024, 1, 5), (2024, 1, 8)];
pub const INSTRUMENTS: [&str; 4] = ["SH600000", "SH600036", "SZ000001", "SZ000002"];
pub const TOY_TASKS: [&str; 3] = ["mid_price", "PB_ROE", "liquidity_imbalance"];

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("unknown toy task `{0}`")]
    UnknownTask(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuoteRow {
    pub bid: f64,
    pub ask: f64,
    pub bid_size: u32,
    pub ask_size: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FundamentalRow {
    pub pb: f64,
    pub roe: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarRow {
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: u64,
}

/// Rows are stored in key order: day-major, then instrument.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub keys: Vec<SeriesKey>,
    pub quotes: Vec<QuoteRow>,
    pub fundamentals: Vec<FundamentalRow>,
    pub bars: Vec<BarRow>,
}

fn cents(rng: &mut ChaCha8Rng, lo: i64, hi: i64) -> i64 {
    rng.random_range(lo..=hi)
}

fn from_cents(c: i64) -> f64 {
    c as f64 / 100.0
}

pub fn generate_toy_dataset(seed: u64) -> ToyDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut base: Vec<i64> = INSTRUMENTS.iter().map(|_| cents(&mut rng, 500, 5000)).collect();
    let mut data = ToyDataset {
        keys: Vec::new(),
        quotes: Vec::new(),
        fundamentals: Vec::new(),
        bars: Vec::new(),
    };
    for (y, m, d) in TRADING_DAYS {
        let day = NaiveDate::from_ymd_opt(y, m, d)
            .expect("valid date")
            .and_time(NaiveTime::MIN);
        for (i, inst) in INSTRUMENTS.iter().enumerate() {
            base[i] = (base[i] + cents(&mut rng, -50, 50)).max(100);
            let bid = base[i];
            let ask = bid + cents(&mut rng, 1, 20);
            let open = bid + cents(&mut rng, -30, 30);
            let close = bid + cents(&mut rng, -30, 30);
            let high = open.max(close) + cents(&mut rng, 0, 25);
            let low = (open.min(close) - cents(&mut rng, 0, 25)).max(1);
            data.keys.push(SeriesKey::new(day, *inst));
            data.quotes.push(QuoteRow {
                bid: from_cents(bid),
                ask: from_cents(ask),
                bid_size: rng.random_range(100..=10_000),
                ask_size: rng.random_range(100..=10_000),
            });
            data.fundamentals.push(FundamentalRow {
                pb: from_cents(cents(&mut rng, 50, 500)),
                roe: rng.random_range(20..=300) as f64 / 1000.0,
            });
            data.bars.push(BarRow {
                open: from_cents(open),
                high: from_cents(high),
                low: from_cents(low),
                close: from_cents(close),
                volume: rng.random_range(1_000..=1_000_000),
            });
        }
    }
    data
}

impl ToyDataset {
    fn table<R>(&self, header: &str, rows: &[R], render: impl Fn(&R) -> String) -> String {
        let mut out = format!("{header}\n");
        for (key, row) in self.keys.iter().zip(rows) {
            let _ = writeln!(
                out,
                "{},{},{}",
                format_datetime(&key.datetime),
                key.instrument,
                render(row)
            );
        }
        out
    }

    pub fn quotes_csv(&self) -> String {
        self.table("datetime,instrument,bid,ask,bid_size,ask_size", &self.quotes, |q| {
            format!(
                "{},{},{},{}",
                format_value(q.bid),
                format_value(q.ask),
                q.bid_size,
                q.ask_size
            )
        })
    }

    pub fn fundamentals_csv(&self) -> String {
        self.table("datetime,instrument,pb,roe", &self.fundamentals, |f| {
            format!("{},{}", format_value(f.pb), format_value(f.roe))
        })
    }

    pub fn bars_csv(&self) -> String {
        self.table("datetime,instrument,open,high,low,close,volume", &self.bars, |b| {
            format!(
                "{},{},{},{},{}",
                format_value(b.open),
                format_value(b.high),
                format_value(b.low),
                format_value(b.close),
                b.volume
            )
        })
    }
}

pub fn ground_truth(data: &ToyDataset, task_name: &str) -> Result<KeyedSeries, ToyError> {
    let value: Box<dyn Fn(usize) -> f64> = match task_name {
        "mid_price" => Box::new(|i| (data.quotes[i].bid + data.quotes[i].ask) / 2.0),
        "liquidity_imbalance" => Box::new(|i| {
            let (b, a) = (f64::from(data.quotes[i].bid_size), f64::from(data.quotes[i].ask_size));
            (b - a) / (b + a)
        }),
        "PB_ROE" => Box::new(|i| data.fundamentals[i].pb / data.fundamentals[i].roe),
        other => return Err(ToyError::UnknownTask(other.to_string())),
    };
    Ok(data
        .keys
        .iter()
        .enumerate()
        .map(|(i, k)| (k.clone(), Some(value(i))))
        .collect())
}

fn write_file(path: &Path, contents: &str) -> Result<(), ToyError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| ToyError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, contents).map_err(|source| ToyError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn quotes_source(dir: &Path) -> DataSourceDescriptor {
    DataSourceDescriptor {
        name: "quotes".into(),
        path: dir.join("data/quotes.csv"),
        schema_note: "columns datetime,instrument,bid,ask,bid_size,ask_size; one row per (datetime, instrument)".into(),
    }
}

/// The three toy tasks, with data sources and ground truth under `dir`.
pub fn toy_task_set(dir: &Path) -> Vec<TaskSpec> {
    let fundamentals = DataSourceDescriptor {
        name: "fundamentals".into(),
        path: dir.join("data/fundamentals.csv"),
        schema_note: "columns datetime,instrument,pb,roe; one row per (datetime, instrument)".into(),
    };
    let spec = |id: &str, category, difficulty, description: &str, sources| TaskSpec {
        id: TaskId::new(id),
        name: id.to_string(),
        category,
        difficulty,
        description: description.to_string(),
        data_sources: sources,
        output_contract: OutputContract::default(),
        implementable: Some(true),
        ground_truth: Some(GroundTruthRef {
            output: dir.join(format!("golden/{id}.csv")),
            code: None,
        }),
    };
    vec![
        spec(
            "mid_price",
            TaskCategory::HighFrequency,
            Difficulty::Easy,
            "Mid price: the average of the best bid and best ask, (bid + ask) / 2.",
            vec![quotes_source(dir)],
        ),
        spec(
            "PB_ROE",
            TaskCategory::Fundamental,
            Difficulty::Easy,
            "Price-to-book divided by return on equity, pb / roe.",
            vec![fundamentals],
        ),
        spec(
            "liquidity_imbalance",
            TaskCategory::HighFrequency,
            Difficulty::Medium,
            "Order-book size imbalance, (bid_size - ask_size) / (bid_size + ask_size).",
            vec![quotes_source(dir)],
        ),
    ]
}

/// Writes `data/*.csv`, `golden/<task>.csv`, and `tasks.json` under `dir`.
pub fn materialize(dir: &Path, seed: u64) -> Result<Vec<TaskSpec>, ToyError> {
    let data = generate_toy_dataset(seed);
    write_file(&dir.join("data/quotes.csv"), &data.quotes_csv())?;
    write_file(&dir.join("data/fundamentals.csv"), &data.fundamentals_csv())?;
    write_file(&dir.join("data/bars.csv"), &data.bars_csv())?;
    for name in TOY_TASKS {
        let series = ground_truth(&data, name)?;
        write_file(
            &dir.join(format!("golden/{name}.csv")),
            &write_series(&series, &OutputContract::default()),
        )?;
    }
    let tasks = toy_task_set(dir);
    let json = serde_json::to_string_pretty(&tasks).expect("task specs serialize");
    write_file(&dir.join("tasks.json"), &(json + "\n"))?;
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluators::{parse_output_str, pearson};

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_toy_dataset(42);
        let b = generate_toy_dataset(42);
        assert_eq!(a.quotes_csv(), b.quotes_csv());
        assert_eq!(a.bars_csv(), b.bars_csv());
        assert_ne!(a.quotes_csv(), generate_toy_dataset(43).quotes_csv());
    }

    #[test]
    fn tables_are_well_formed() {
        let d = generate_toy_dataset(42);
        assert_eq!(d.keys.len(), 20);
        assert_eq!(d.quotes.len(), 20);
        assert_eq!(d.fundamentals.len(), 20);
        assert_eq!(d.bars.len(), 20);
        assert!(d
            .quotes
            .iter()
            .all(|q| q.bid < q.ask && q.bid_size > 0 && q.ask_size > 0));
        assert!(d
            .bars
            .iter()
            .all(|b| b.volume > 0 && b.low <= b.open.min(b.close) && b.high >= b.open.max(b.close)));
        assert!(d.fundamentals.iter().all(|f| f.roe > 0.0));
        let mut keys = d.keys.clone();
        keys.dedup();
        assert_eq!(keys.len(), 20);
        assert!(d.keys.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn formulas() {
        let key = SeriesKey::new(
            NaiveDate::from_ymd_opt(2024, 1, 2).unwrap().and_time(NaiveTime::MIN),
            "X",
        );
        let data = ToyDataset {
            keys: vec![key.clone()],
            quotes: vec![QuoteRow {
                bid: 10.0,
                ask: 12.0,
                bid_size: 500,
                ask_size: 500,
            }],
            fundamentals: vec![FundamentalRow { pb: 1.5, roe: 0.1 }],
            bars: vec![],
        };
        assert_eq!(ground_truth(&data, "mid_price").unwrap()[&key], Some(11.0));
        assert_eq!(ground_truth(&data, "liquidity_imbalance").unwrap()[&key], Some(0.0));
        assert!(matches!(ground_truth(&data, "alpha053"), Err(ToyError::UnknownTask(_))));
    }

    #[test]
    fn goldens_satisfy_the_contract() {
        let d = generate_toy_dataset(42);
        for name in TOY_TASKS {
            let text = write_series(&ground_truth(&d, name).unwrap(), &OutputContract::default());
            let parsed = parse_output_str(&text, &OutputContract::default());
            assert_eq!(parsed.report.score, 1, "{name}");
            let s = parsed.series.unwrap();
            let r = pearson(&s, &s, 0.5).unwrap();
            assert!((r.correlation.unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn materialized_task_set_validates() {
        let dir = tempfile::tempdir().unwrap();
        let tasks = materialize(dir.path(), 42).unwrap();
        assert!(crate::model::validate_task_set(&tasks).is_empty());
        let loaded = crate::model::load_task_set(&dir.path().join("tasks.json")).unwrap();
        assert_eq!(loaded, tasks);
        assert!(tasks.iter().all(|t| t.data_sources.iter().all(|d| d.path.exists())));
    }
}
