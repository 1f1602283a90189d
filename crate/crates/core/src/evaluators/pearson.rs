//! Correlation and value accuracy of a candidate series against ground truth.

use thiserror::Error;

use super::format::KeyedSeries;
use crate::model::QuantReport;

pub const DEFAULT_MIN_OVERLAP: f64 = 0.5;
const ABS_TOL: f64 = 1e-8;
const REL_TOL: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PearsonError {
    #[error("ground-truth series is empty")]
    EmptyTruth,
}

/// Aligns on shared keys (dropping pairs with a missing side) and scores
/// the pairs. Correlation is undefined below two pairs, below `min_overlap`
/// coverage of the truth keys, or when either side is constant.
pub fn pearson(candidate: &KeyedSeries, truth: &KeyedSeries, min_overlap: f64) -> Result<QuantReport, PearsonError> {
    if truth.is_empty() {
        return Err(PearsonError::EmptyTruth);
    }
    let mut acc = CoMoments::default();
    let mut close = 0usize;
    for (key, t) in truth {
        let (Some(t), Some(Some(c))) = (t, candidate.get(key)) else {
            continue;
        };
        acc.push(*c, *t);
        if (c - t).abs() <= ABS_TOL + REL_TOL * t.abs() {
            close += 1;
        }
    }
    let n = acc.n;
    let overlap_fraction = n as f64 / truth.len() as f64;
    let correlation = if n >= 2 && overlap_fraction >= min_overlap {
        acc.correlation()
    } else {
        None
    };
    Ok(QuantReport {
        correlation,
        value_accuracy: if n == 0 { 0.0 } else { close as f64 / n as f64 },
        overlap_fraction,
        n_aligned: n,
    })
}

/// Single-pass (Welford) means and co-moments.
#[derive(Debug, Default)]
struct CoMoments {
    n: usize,
    mean_x: f64,
    mean_y: f64,
    m2_x: f64,
    m2_y: f64,
    c_xy: f64,
}

impl CoMoments {
    fn push(&mut self, x: f64, y: f64) {
        self.n += 1;
        let n = self.n as f64;
        let dx = x - self.mean_x;
        let dy = y - self.mean_y;
        self.mean_x += dx / n;
        self.mean_y += dy / n;
        self.m2_x += dx * (x - self.mean_x);
        self.m2_y += dy * (y - self.mean_y);
        self.c_xy += dx * (y - self.mean_y);
    }

    fn correlation(&self) -> Option<f64> {
        if self.m2_x <= 0.0 || self.m2_y <= 0.0 {
            return None;
        }
        let r = self.c_xy / (self.m2_x.sqrt() * self.m2_y.sqrt());
        r.is_finite().then(|| r.clamp(-1.0, 1.0))
    }
}
