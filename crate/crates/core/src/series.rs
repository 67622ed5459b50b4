//! Time-series containers, moving-average decomposition, extrema detection
//! and matching, and pointwise error metrics.

use chrono::{Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SeriesError {
    #[error("invalid decomposition window {window} for series of length {len}")]
    InvalidWindow { window: usize, len: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("time step must be positive")]
    InvalidStep,
}

/// Uniformly spaced univariate series. Timestamps are implied by `start` and
/// `step`, so spacing is uniform by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    start: NaiveDateTime,
    step_seconds: i64,
    values: Vec<f64>,
    frequency: String,
}

impl TimeSeries {
    pub fn new(
        start: NaiveDateTime,
        step: Duration,
        values: Vec<f64>,
        frequency: impl Into<String>,
    ) -> Result<Self, SeriesError> {
        if values.is_empty() {
            return Err(SeriesError::EmptyInput);
        }
        if step.num_seconds() <= 0 {
            return Err(SeriesError::InvalidStep);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(SeriesError::NonFinite(i));
        }
        Ok(Self {
            start,
            step_seconds: step.num_seconds(),
            values,
            frequency: frequency.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn start(&self) -> NaiveDateTime {
        self.start
    }

    pub fn step(&self) -> Duration {
        Duration::seconds(self.step_seconds)
    }

    pub fn frequency(&self) -> &str {
        &self.frequency
    }

    pub fn timestamp(&self, i: usize) -> NaiveDateTime {
        self.start + Duration::seconds(self.step_seconds * i as i64)
    }

    pub fn timestamps(&self) -> impl Iterator<Item = NaiveDateTime> + '_ {
        (0..self.len()).map(move |i| self.timestamp(i))
    }

    /// Timestamp one step past the last point.
    pub fn next_timestamp(&self) -> NaiveDateTime {
        self.timestamp(self.len())
    }

    pub fn rows(&self) -> Vec<(NaiveDateTime, f64)> {
        self.timestamps().zip(self.values.iter().copied()).collect()
    }

    /// Series of `values` continuing directly after this one.
    pub fn continuation(&self, values: Vec<f64>) -> Result<Self, SeriesError> {
        Self::new(self.next_timestamp(), self.step(), values, self.frequency.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub trend: Vec<f64>,
    pub seasonal: Vec<f64>,
}

/// Centered moving-average trend with edge-value padding; seasonal is the
/// detrended residual, so `trend[i] + seasonal[i] == values[i]`.
pub fn decompose(values: &[f64], window: usize) -> Result<Decomposition, SeriesError> {
    let n = values.len();
    if n == 0 {
        return Err(SeriesError::EmptyInput);
    }
    if window == 0 || window.is_multiple_of(2) || window > n {
        return Err(SeriesError::InvalidWindow { window, len: n });
    }
    let half = window / 2;
    let at = |j: isize| values[j.clamp(0, n as isize - 1) as usize];
    let trend: Vec<f64> = (0..n as isize)
        .map(|i| {
            let sum: f64 = (i - half as isize..=i + half as isize).map(at).sum();
            sum / window as f64
        })
        .collect();
    // v - t can round so that t + s != v. Re-deriving the trend from the
    // rounded residual is exact whenever |v| >= |t|. Otherwise search a few
    // ulps around both parts; when |t| is much larger than |v| no such pair
    // may exist and the sum is off by at most one rounding.
    let mut trend = trend;
    let seasonal = values
        .iter()
        .zip(trend.iter_mut())
        .map(|(&v, t)| {
            let (tt, s) = exact_split(v, *t);
            *t = tt;
            s
        })
        .collect();
    Ok(Decomposition { trend, seasonal })
}

fn exact_split(v: f64, t: f64) -> (f64, f64) {
    let s = v - t;
    if t + s == v {
        return (t, s);
    }
    let t2 = v - s;
    if t2 + s == v {
        return (t2, s);
    }
    for dt in -3..=3 {
        let tt = step_ulps(t, dt);
        for ds in -3..=3 {
            let ss = step_ulps(s, ds);
            if tt + ss == v {
                return (tt, ss);
            }
        }
    }
    (t, s)
}

fn next_up(x: f64) -> f64 {
    if x.is_nan() || x == f64::INFINITY {
        return x;
    }
    if x == 0.0 {
        return f64::from_bits(1);
    }
    let bits = x.to_bits();
    f64::from_bits(if x > 0.0 { bits + 1 } else { bits - 1 })
}

fn step_ulps(mut x: f64, k: i32) -> f64 {
    for _ in 0..k.unsigned_abs() {
        x = if k > 0 { next_up(x) } else { next_down(x) };
    }
    x
}

fn next_down(x: f64) -> f64 {
    -next_up(-x)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExtremaSet {
    pub maxima: Vec<usize>,
    pub minima: Vec<usize>,
}

/// Strict interior local extrema. Plateaus produce nothing.
pub fn detect_extrema(values: &[f64]) -> ExtremaSet {
    let mut out = ExtremaSet::default();
    for (k, w) in values.windows(3).enumerate() {
        if w[0] < w[1] && w[1] > w[2] {
            out.maxima.push(k + 1);
        } else if w[0] > w[1] && w[1] < w[2] {
            out.minima.push(k + 1);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MatchCounts {
    pub matched_maxima: usize,
    pub matched_minima: usize,
    pub total_gt_maxima: usize,
    pub total_gt_minima: usize,
    pub total_pred_maxima: usize,
    pub total_pred_minima: usize,
}

/// Greedy per-kind matching: ground-truth indices in ascending order each take
/// the nearest unused predicted index within `tolerance` (ties to the smaller).
pub fn match_extrema(pred: &ExtremaSet, truth: &ExtremaSet, tolerance: usize) -> MatchCounts {
    MatchCounts {
        matched_maxima: greedy_match(&pred.maxima, &truth.maxima, tolerance),
        matched_minima: greedy_match(&pred.minima, &truth.minima, tolerance),
        total_gt_maxima: truth.maxima.len(),
        total_gt_minima: truth.minima.len(),
        total_pred_maxima: pred.maxima.len(),
        total_pred_minima: pred.minima.len(),
    }
}

fn greedy_match(pred: &[usize], truth: &[usize], tolerance: usize) -> usize {
    let mut used = vec![false; pred.len()];
    let mut truth_sorted = truth.to_vec();
    truth_sorted.sort_unstable();
    let mut matched = 0;
    for &g in &truth_sorted {
        let best = pred
            .iter()
            .enumerate()
            .filter(|(j, &p)| !used[*j] && p.abs_diff(g) <= tolerance)
            .min_by_key(|(_, &p)| (p.abs_diff(g), p));
        if let Some((j, _)) = best {
            used[j] = true;
            matched += 1;
        }
    }
    matched
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Mse,
    Mae,
    Mape,
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(Metric::Mse),
            "mae" => Ok(Metric::Mae),
            "mape" => Ok(Metric::Mape),
            other => Err(format!("unknown metric '{other}' (expected mse, mae or mape)")),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Mse => "mse",
            Metric::Mae => "mae",
            Metric::Mape => "mape",
        })
    }
}

const MAPE_FLOOR: f64 = 1e-8;

/// MAPE divides by the truth, so it is not symmetric in its arguments.
pub fn pointwise_metric(kind: Metric, pred: &[f64], truth: &[f64]) -> Result<f64, SeriesError> {
    if pred.len() != truth.len() {
        return Err(SeriesError::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(SeriesError::EmptyInput);
    }
    let n = pred.len() as f64;
    let pairs = pred.iter().zip(truth);
    let total: f64 = match kind {
        Metric::Mse => pairs.map(|(p, t)| (p - t) * (p - t)).sum(),
        Metric::Mae => pairs.map(|(p, t)| (p - t).abs()).sum(),
        Metric::Mape => pairs.map(|(p, t)| (p - t).abs() / t.abs().max(MAPE_FLOOR)).sum(),
    };
    Ok(total / n)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn std_pop(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

const ZNORM_STD_FLOOR: f64 = 1e-9;

/// Z-scores `x` against the statistics of `reference`.
pub fn znormalize(x: &[f64], reference: &[f64]) -> Result<Vec<f64>, SeriesError> {
    if reference.is_empty() {
        return Err(SeriesError::EmptyInput);
    }
    let m = mean(reference);
    let s = std_pop(reference).max(ZNORM_STD_FLOOR);
    Ok(x.iter().map(|v| (v - m) / s).collect())
}
