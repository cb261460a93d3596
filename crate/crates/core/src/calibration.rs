//! Equal-width confidence binning, ECE/MCE and reliability-diagram rows.
//!
//! Generic over any ordered field so that the same code runs on `f64` and on
//! exact rationals.

use std::fmt::Display;
use std::io::{self, Write};
use std::str::FromStr;

use num_traits::{FromPrimitive, Num, Signed};
use serde::Serialize;

use crate::error::{Error, Result};

/// Default number of bins.
pub const DEFAULT_BINS: usize = 10;

pub trait CalibrationScalar: Clone + PartialOrd + Num + Signed + FromPrimitive + Display {}

impl<T> CalibrationScalar for T where T: Clone + PartialOrd + Num + Signed + FromPrimitive + Display {}

/// One bin of the reliability diagram. The interval is `(lower, upper]`, and
/// `[0, upper]` for the first bin.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReliabilityBin<T> {
    pub lower: T,
    pub upper: T,
    pub count: usize,
    /// `None` for an empty bin.
    pub mean_confidence: Option<T>,
    /// `None` for an empty bin.
    pub accuracy: Option<T>,
}

impl<T: CalibrationScalar> ReliabilityBin<T> {
    fn gap(&self) -> Option<T> {
        match (&self.accuracy, &self.mean_confidence) {
            (Some(a), Some(c)) => Some((a.clone() - c.clone()).abs()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport<T> {
    pub bins: Vec<ReliabilityBin<T>>,
    pub ece: T,
    pub mce: T,
    pub total_count: usize,
}

fn of_usize<T: CalibrationScalar>(n: usize) -> T {
    T::from_usize(n).expect("count representable")
}

/// Bin upper edges `b / n` for `b = 1..=n`.
fn upper_edges<T: CalibrationScalar>(n_bins: usize) -> Vec<T> {
    let n = of_usize::<T>(n_bins);
    (1..=n_bins).map(|b| of_usize::<T>(b) / n.clone()).collect()
}

/// Index of the bin holding `confidence`: the first bin whose upper edge is
/// `>= confidence`.
pub fn bin_index<T: CalibrationScalar>(confidence: &T, n_bins: usize) -> usize {
    let uppers = upper_edges::<T>(n_bins);
    uppers.partition_point(|u| u < confidence).min(n_bins - 1)
}

pub fn calibration_report<T: CalibrationScalar>(
    pairs: &[(T, bool)],
    n_bins: usize,
) -> Result<CalibrationReport<T>> {
    if pairs.is_empty() {
        return Err(Error::invalid("calibration needs at least one prediction"));
    }
    if n_bins == 0 {
        return Err(Error::invalid("number of bins must be positive"));
    }
    let uppers = upper_edges::<T>(n_bins);
    let mut confidences: Vec<Vec<T>> = vec![Vec::new(); n_bins];
    let mut correct = vec![0usize; n_bins];
    for (i, (c, ok)) in pairs.iter().enumerate() {
        if !(*c >= T::zero() && *c <= T::one()) {
            return Err(Error::invalid(format!("confidence {c} at index {i} outside [0, 1]")));
        }
        let b = uppers.partition_point(|u| u < c).min(n_bins - 1);
        confidences[b].push(c.clone());
        correct[b] += usize::from(*ok);
    }

    let mut bins = Vec::with_capacity(n_bins);
    for (b, mut members) in confidences.into_iter().enumerate() {
        let count = members.len();
        let lower = if b == 0 { T::zero() } else { uppers[b - 1].clone() };
        let (mean_confidence, accuracy) = if count == 0 {
            (None, None)
        } else {
            // sorted summation keeps the result independent of input order
            members.sort_by(|a, b| a.partial_cmp(b).expect("confidences are ordered"));
            let sum = members.into_iter().fold(T::zero(), |acc, c| acc + c);
            let n = of_usize::<T>(count);
            (Some(sum / n.clone()), Some(of_usize::<T>(correct[b]) / n))
        };
        bins.push(ReliabilityBin {
            lower,
            upper: uppers[b].clone(),
            count,
            mean_confidence,
            accuracy,
        });
    }
    Ok(CalibrationReport::from_bins(bins))
}

impl<T: CalibrationScalar> CalibrationReport<T> {
    /// Recomputes ECE, MCE and the total from per-bin statistics.
    pub fn from_bins(bins: Vec<ReliabilityBin<T>>) -> Self {
        let total_count: usize = bins.iter().map(|b| b.count).sum();
        let total = of_usize::<T>(total_count.max(1));
        let mut ece = T::zero();
        let mut mce = T::zero();
        for bin in &bins {
            if let Some(gap) = bin.gap() {
                ece = ece + of_usize::<T>(bin.count) / total.clone() * gap.clone();
                if gap > mce {
                    mce = gap;
                }
            }
        }
        // a weighted mean of the gaps cannot exceed their maximum; absorb rounding
        if ece > mce {
            ece = mce.clone();
        }
        Self {
            bins,
            ece,
            mce,
            total_count,
        }
    }
}

pub const RELIABILITY_HEADER: &str = "lower,upper,count,mean_confidence,accuracy";

/// One CSV row per bin in bin order; empty bins leave the confidence and
/// accuracy fields blank.
pub fn reliability_rows<T: CalibrationScalar>(report: &CalibrationReport<T>) -> Vec<String> {
    let opt = |v: &Option<T>| v.as_ref().map(|x| x.to_string()).unwrap_or_default();
    report
        .bins
        .iter()
        .map(|b| {
            format!(
                "{},{},{},{},{}",
                b.lower,
                b.upper,
                b.count,
                opt(&b.mean_confidence),
                opt(&b.accuracy)
            )
        })
        .collect()
}

pub fn write_reliability_csv<T: CalibrationScalar, W: Write>(
    mut out: W,
    report: &CalibrationReport<T>,
) -> io::Result<()> {
    writeln!(out, "{RELIABILITY_HEADER}")?;
    for row in reliability_rows(report) {
        writeln!(out, "{row}")?;
    }
    Ok(())
}

/// Parses rows produced by [`write_reliability_csv`] (header optional).
pub fn parse_reliability_csv<T>(text: &str) -> Result<CalibrationReport<T>>
where
    T: CalibrationScalar + FromStr,
{
    fn field<T: FromStr>(raw: &str, line: usize, name: &str) -> Result<T> {
        raw.trim()
            .parse()
            .map_err(|_| Error::invalid(format!("line {line}: bad {name} field {raw:?}")))
    }
    fn optional<T: FromStr>(raw: &str, line: usize, name: &str) -> Result<Option<T>> {
        if raw.trim().is_empty() {
            Ok(None)
        } else {
            field(raw, line, name).map(Some)
        }
    }

    let mut bins = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || (i == 0 && line.trim() == RELIABILITY_HEADER) {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(Error::invalid(format!(
                "line {}: expected 5 fields, found {}",
                i + 1,
                cols.len()
            )));
        }
        bins.push(ReliabilityBin {
            lower: field(cols[0], i + 1, "lower")?,
            upper: field(cols[1], i + 1, "upper")?,
            count: field(cols[2], i + 1, "count")?,
            mean_confidence: optional(cols[3], i + 1, "mean_confidence")?,
            accuracy: optional(cols[4], i + 1, "accuracy")?,
        });
    }
    Ok(CalibrationReport::from_bins(bins))
}
