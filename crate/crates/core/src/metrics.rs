//! Classification and group-fairness metrics.
//!
//! A prediction is positive iff `score >= threshold`. Coverage groups use
//! [`coverage_group`]: low iff `coverage < split`. Quantities whose
//! denominator vanishes are reported as [`Measure::Undefined`], never as a
//! silent zero or an accidental NaN.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tiles::{coverage_group, CoverageGroup};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_COVERAGE_SPLIT: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("input lengths differ: {0}")]
    LengthMismatch(String),
    #[error("non-finite score at index {0}")]
    NonFinite(usize),
    #[error("no values to aggregate")]
    Empty,
}

/// A metric value, or an explicit marker when it cannot be computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum Measure {
    Value(f64),
    Undefined,
    Infinite,
}

impl Measure {
    fn ratio(num: usize, den: usize) -> Self {
        if den == 0 {
            Measure::Undefined
        } else {
            Measure::Value(num as f64 / den as f64)
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Measure::Value(v) => Some(v),
            _ => None,
        }
    }

    pub fn is_defined(self) -> bool {
        matches!(self, Measure::Value(_))
    }

    fn map2(self, other: Measure, f: impl FnOnce(f64, f64) -> f64) -> Measure {
        match (self, other) {
            (Measure::Value(a), Measure::Value(b)) => Measure::Value(f(a, b)),
            _ => Measure::Undefined,
        }
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Measure::Value(v) => write!(f, "{v}"),
            Measure::Undefined => f.write_str("n/a"),
            Measure::Infinite => f.write_str("inf"),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn tpr(&self) -> Measure {
        Measure::ratio(self.tp, self.tp + self.fn_)
    }

    pub fn fpr(&self) -> Measure {
        Measure::ratio(self.fp, self.fp + self.tn)
    }

    pub fn tnr(&self) -> Measure {
        Measure::ratio(self.tn, self.tn + self.fp)
    }
}

fn check_scores(scores: &[f64]) -> Result<(), MetricsError> {
    match scores.iter().position(|s| !s.is_finite()) {
        Some(i) => Err(MetricsError::NonFinite(i)),
        None => Ok(()),
    }
}

fn check_len(what: &str, a: usize, b: usize) -> Result<(), MetricsError> {
    if a == b {
        Ok(())
    } else {
        Err(MetricsError::LengthMismatch(format!("{a} scores vs {b} {what}")))
    }
}

pub fn confusion(
    scores: &[f64],
    labels: &[bool],
    threshold: f64,
) -> Result<ConfusionCounts, MetricsError> {
    check_len("labels", scores.len(), labels.len())?;
    check_scores(scores)?;
    let mut c = ConfusionCounts::default();
    for (&s, &y) in scores.iter().zip(labels) {
        c.add(s >= threshold, y);
    }
    Ok(c)
}

/// `(TPR + TNR) / 2`.
pub fn balanced_accuracy(c: &ConfusionCounts) -> Measure {
    c.tpr().map2(c.tnr(), |tpr, tnr| (tpr + tnr) / 2.0)
}

pub fn precision(c: &ConfusionCounts) -> Measure {
    Measure::ratio(c.tp, c.tp + c.fp)
}

pub fn recall(c: &ConfusionCounts) -> Measure {
    c.tpr()
}

/// Per-group error rates behind the equalized-odds gaps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub low: ConfusionCounts,
    pub high: ConfusionCounts,
}

impl GroupRates {
    pub fn fpr_low(&self) -> Measure {
        self.low.fpr()
    }

    pub fn fpr_high(&self) -> Measure {
        self.high.fpr()
    }

    pub fn tpr_low(&self) -> Measure {
        self.low.tpr()
    }

    pub fn tpr_high(&self) -> Measure {
        self.high.tpr()
    }

    /// `FPR_low − FPR_high`; negative when high-coverage tiles get more
    /// false positives.
    pub fn delta_fpr(&self) -> Measure {
        self.fpr_low().map2(self.fpr_high(), |a, b| a - b)
    }

    /// `TPR_low − TPR_high`.
    pub fn delta_tpr(&self) -> Measure {
        self.tpr_low().map2(self.tpr_high(), |a, b| a - b)
    }
}

pub fn group_rates(
    scores: &[f64],
    labels: &[bool],
    coverages: &[f64],
    threshold: f64,
    split: f64,
) -> Result<GroupRates, MetricsError> {
    check_len("labels", scores.len(), labels.len())?;
    check_len("coverages", scores.len(), coverages.len())?;
    check_scores(scores)?;
    let mut rates = GroupRates {
        low: ConfusionCounts::default(),
        high: ConfusionCounts::default(),
    };
    for ((&s, &y), &cov) in scores.iter().zip(labels).zip(coverages) {
        let group = match coverage_group(cov, split) {
            CoverageGroup::Low => &mut rates.low,
            CoverageGroup::High => &mut rates.high,
        };
        group.add(s >= threshold, y);
    }
    Ok(rates)
}

/// `(ΔFPR, ΔTPR)` between the low- and high-coverage groups.
pub fn delta_rates(
    scores: &[f64],
    labels: &[bool],
    coverages: &[f64],
    threshold: f64,
    split: f64,
) -> Result<(Measure, Measure), MetricsError> {
    let r = group_rates(scores, labels, coverages, threshold, split)?;
    Ok((r.delta_fpr(), r.delta_tpr()))
}

/// Ratio of the larger to the smaller group flag rate; 1 is perfect parity.
///
/// Needs no labels. Undefined when a group is empty or both rates are zero,
/// infinite when exactly one rate is zero.
pub fn parity(
    scores: &[f64],
    coverages: &[f64],
    threshold: f64,
    split: f64,
) -> Result<Measure, MetricsError> {
    check_len("coverages", scores.len(), coverages.len())?;
    check_scores(scores)?;
    // [low, high] x [tiles, flagged]
    let mut n = [[0usize; 2]; 2];
    for (&s, &cov) in scores.iter().zip(coverages) {
        let g = usize::from(coverage_group(cov, split) == CoverageGroup::High);
        n[g][0] += 1;
        n[g][1] += usize::from(s >= threshold);
    }
    if n[0][0] == 0 || n[1][0] == 0 {
        return Ok(Measure::Undefined);
    }
    let r_low = n[0][1] as f64 / n[0][0] as f64;
    let r_high = n[1][1] as f64 / n[1][0] as f64;
    Ok(match (r_low == 0.0, r_high == 0.0) {
        (true, true) => Measure::Undefined,
        (true, false) | (false, true) => Measure::Infinite,
        (false, false) => Measure::Value(r_low.max(r_high) / r_low.min(r_high)),
    })
}

pub fn count_flags(scores: &[f64], threshold: f64) -> usize {
    scores.iter().filter(|&&s| s >= threshold).count()
}

/// Mean and sample standard deviation (n − 1 denominator) over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub mean: f64,
    pub std: f64,
    /// Set when only one value was available and `std` was forced to 0.
    pub single_seed: bool,
}

pub fn aggregate_seeds(values: &[f64]) -> Result<SeedSummary, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok(SeedSummary {
            mean,
            std: 0.0,
            single_seed: true,
        });
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(SeedSummary {
        mean,
        std: var.sqrt(),
        single_seed: false,
    })
}

/// Mean ± std of a metric whose per-seed values may be markers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasureSummary {
    pub mean: Measure,
    pub std: Measure,
}

/// Aggregates the defined values. Any infinite seed makes the mean
/// infinite; no defined seed at all leaves both fields undefined.
pub fn aggregate_measures(values: &[Measure]) -> MeasureSummary {
    if values.contains(&Measure::Infinite) {
        return MeasureSummary {
            mean: Measure::Infinite,
            std: Measure::Undefined,
        };
    }
    let defined: Vec<f64> = values.iter().filter_map(|m| m.value()).collect();
    match aggregate_seeds(&defined) {
        Ok(s) => MeasureSummary {
            mean: Measure::Value(s.mean),
            std: Measure::Value(s.std),
        },
        Err(_) => MeasureSummary {
            mean: Measure::Undefined,
            std: Measure::Undefined,
        },
    }
}
