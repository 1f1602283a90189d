//! Seed-42 toy dataset and reference outputs, frozen under
//! `tests/fixtures/toy_seed42`. Set `AUTODEV_BLESS=1` to rewrite them.

use std::path::{Path, PathBuf};

use autodev_core::evaluators::{parse_output, pearson};
use autodev_core::model::OutputContract;
use autodev_core::toy;

const FILES: [&str; 6] = [
    "data/quotes.csv",
    "data/fundamentals.csv",
    "data/bars.csv",
    "golden/mid_price.csv",
    "golden/PB_ROE.csv",
    "golden/liquidity_imbalance.csv",
];

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy_seed42")
}

#[test]
fn generated_files_match_frozen_fixtures() {
    let tmp = tempfile::tempdir().unwrap();
    toy::materialize(tmp.path(), 42).unwrap();
    for f in FILES {
        let fresh = std::fs::read(tmp.path().join(f)).unwrap();
        let frozen_path = fixture_dir().join(f);
        if std::env::var_os("AUTODEV_BLESS").is_some() {
            std::fs::create_dir_all(frozen_path.parent().unwrap()).unwrap();
            std::fs::write(&frozen_path, &fresh).unwrap();
        }
        let frozen = std::fs::read(&frozen_path).unwrap();
        assert_eq!(fresh, frozen, "{f} drifted from its frozen copy");
    }
}

fn row<'a>(text: &'a str, key: &str) -> Vec<&'a str> {
    text.lines().find(|l| l.starts_with(key)).unwrap().split(',').collect()
}

/// Rows recomputed by hand from the frozen input tables.
#[test]
fn hand_checked_rows() {
    let read = |f: &str| std::fs::read_to_string(fixture_dir().join(f)).unwrap();
    let quotes = read("data/quotes.csv");
    let fundamentals = read("data/fundamentals.csv");
    let mid = read("golden/mid_price.csv");
    let imb = read("golden/liquidity_imbalance.csv");
    let pbroe = read("golden/PB_ROE.csv");

    let lit = |text: &str, key: &str| row(text, key)[2].parse::<f64>().unwrap();
    let hand = [
        ("2024-01-02,SH600000", 35.495, 293.0 / 10529.0, 24.7826086956522),
        ("2024-01-05,SZ000001", 24.27, -2117.0 / 9999.0, 11.5025906735751),
        ("2024-01-08,SZ000002", 33.215, -2775.0 / 7301.0, 14.9224806201550),
    ];
    for (key, m, i, p) in hand {
        assert!((lit(&mid, key) - m).abs() < 1e-9, "{key}");
        assert!((lit(&imb, key) - i).abs() < 1e-9, "{key}");
        assert!((lit(&pbroe, key) - p).abs() < 1e-9, "{key}");
    }

    for key in ["2024-01-02,SH600000", "2024-01-05,SZ000001", "2024-01-08,SZ000002"] {
        let q = row(&quotes, key);
        let (bid, ask): (f64, f64) = (q[2].parse().unwrap(), q[3].parse().unwrap());
        let (bs, a_s): (f64, f64) = (q[4].parse().unwrap(), q[5].parse().unwrap());
        let m: f64 = row(&mid, key)[2].parse().unwrap();
        assert_eq!(m, (bid + ask) / 2.0, "{key}");
        let i: f64 = row(&imb, key)[2].parse().unwrap();
        assert_eq!(i, (bs - a_s) / (bs + a_s), "{key}");
        let fr = row(&fundamentals, key);
        let p: f64 = row(&pbroe, key)[2].parse().unwrap();
        assert_eq!(
            p,
            fr[2].parse::<f64>().unwrap() / fr[3].parse::<f64>().unwrap(),
            "{key}"
        );
    }
}

#[test]
fn frozen_goldens_score_one_and_self_correlate() {
    for name in toy::TOY_TASKS {
        let parsed = parse_output(
            &fixture_dir().join(format!("golden/{name}.csv")),
            &OutputContract::default(),
        );
        assert_eq!(parsed.report.score, 1, "{name}");
        let s = parsed.series.unwrap();
        assert_eq!(s.len(), 20);
        let r = pearson(&s, &s, 0.5).unwrap();
        assert!((r.correlation.unwrap() - 1.0).abs() < 1e-12);
    }
}
