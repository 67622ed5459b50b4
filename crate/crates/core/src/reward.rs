//! Multi-term forecasting reward: format, length, accuracy, seasonal/trend
//! decomposition and structural (extrema) similarity. The scalar reward of a
//! completion is the sum of the enabled terms.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::series::{decompose, detect_extrema, match_extrema, pointwise_metric, znormalize, Metric};
use crate::textio::{parse_completion, ForecastTask, ParsedCompletion};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardConfigError {
    #[error("sigmoid_slope must be positive, got {0}")]
    Slope(f64),
    #[error("component_coefficient must be non-negative, got {0}")]
    Coefficient(f64),
    #[error("decomposition_window must be odd and >= 1, got {0}")]
    Window(usize),
}

/// How the seasonal/trend MSE terms enter the sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentMode {
    /// `coefficient · (1 − σ(slope · mse)) · 2`, bounded in `(0, coefficient]`.
    #[default]
    SigmoidMapped,
    /// `−mse`, the literal error quantity.
    RawPenalty,
}

impl std::str::FromStr for ComponentMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sigmoid_mapped" => Ok(Self::SigmoidMapped),
            "raw_penalty" => Ok(Self::RawPenalty),
            o => Err(format!(
                "unknown component mode '{o}' (expected sigmoid_mapped or raw_penalty)"
            )),
        }
    }
}

impl std::fmt::Display for ComponentMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::SigmoidMapped => "sigmoid_mapped",
            Self::RawPenalty => "raw_penalty",
        })
    }
}

/// Per-term switches used for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnabledTerms {
    pub format: bool,
    pub length: bool,
    pub accuracy: bool,
    pub seasonal: bool,
    pub trend: bool,
    pub changepoint: bool,
}

impl Default for EnabledTerms {
    fn default() -> Self {
        Self::all()
    }
}

impl EnabledTerms {
    pub fn all() -> Self {
        Self {
            format: true,
            length: true,
            accuracy: true,
            seasonal: true,
            trend: true,
            changepoint: true,
        }
    }

    pub fn none() -> Self {
        Self {
            format: false,
            length: false,
            accuracy: false,
            seasonal: false,
            trend: false,
            changepoint: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub accuracy_metric: Metric,
    pub sigmoid_slope: f64,
    pub component_coefficient: f64,
    pub component_mode: ComponentMode,
    pub extrema_tolerance: usize,
    pub decomposition_window: usize,
    pub enabled: EnabledTerms,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            accuracy_metric: Metric::Mse,
            sigmoid_slope: 0.3,
            component_coefficient: 0.5,
            component_mode: ComponentMode::SigmoidMapped,
            extrema_tolerance: 3,
            decomposition_window: 5,
            enabled: EnabledTerms::all(),
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardConfigError> {
        if !(self.sigmoid_slope > 0.0) {
            return Err(RewardConfigError::Slope(self.sigmoid_slope));
        }
        if !(self.component_coefficient >= 0.0) {
            return Err(RewardConfigError::Coefficient(self.component_coefficient));
        }
        if self.decomposition_window == 0 || self.decomposition_window.is_multiple_of(2) {
            return Err(RewardConfigError::Window(self.decomposition_window));
        }
        Ok(())
    }

    /// Total reward of a perfect, full-length, well-formed forecast.
    pub fn max_total(&self) -> f64 {
        let e = &self.enabled;
        let component = match self.component_mode {
            ComponentMode::SigmoidMapped => self.component_coefficient,
            ComponentMode::RawPenalty => 0.0,
        };
        let mut t = 0.0;
        if e.length {
            t += LENGTH_FULL;
        }
        if e.accuracy {
            t += 1.0;
        }
        if e.seasonal {
            t += component;
        }
        if e.trend {
            t += component;
        }
        if e.changepoint {
            t += 2.0 * EXTREMA_CREDIT;
        }
        t
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: f64,
    pub length: f64,
    pub accuracy: f64,
    pub seasonal: f64,
    pub trend: f64,
    pub changepoint: f64,
    pub total: f64,
}

pub const BREAKDOWN_CSV_HEADER: &str = "format,length,accuracy,seasonal,trend,changepoint,total";

impl RewardBreakdown {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.format, self.length, self.accuracy, self.seasonal, self.trend, self.changepoint, self.total
        )
    }

    fn with_total(mut self, enabled: &EnabledTerms) -> Self {
        let mut t = 0.0;
        for (on, v) in [
            (enabled.format, &mut self.format),
            (enabled.length, &mut self.length),
            (enabled.accuracy, &mut self.accuracy),
            (enabled.seasonal, &mut self.seasonal),
            (enabled.trend, &mut self.trend),
            (enabled.changepoint, &mut self.changepoint),
        ] {
            if on {
                t += *v;
            } else {
                *v = 0.0;
            }
        }
        self.total = t;
        self
    }
}

pub fn format_reward(parsed: &ParsedCompletion) -> f64 {
    if parsed.is_valid() {
        0.0
    } else {
        -1.0
    }
}

const LENGTH_FULL: f64 = 0.1;

/// `len` is the number of parsed forecast rows.
pub fn length_reward(answer_len: usize, target_len: usize) -> f64 {
    if target_len == 0 || answer_len >= target_len {
        LENGTH_FULL
    } else {
        LENGTH_FULL * (answer_len as f64 / target_len as f64)
    }
}

/// `(1 − σ(slope · d)) · 2`, written as `2 / (1 + e^{slope·d})`.
pub fn sigmoid_map(distance: f64, slope: f64) -> f64 {
    2.0 / (1.0 + (slope * distance).exp())
}

/// Overlapping prefix of `pred` and `truth`, both z-scored against the
/// truth prefix.
fn normalized_overlap(pred: &[f64], truth: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = pred.len().min(truth.len());
    if n == 0 {
        return None;
    }
    let t = &truth[..n];
    let p = znormalize(&pred[..n], t).ok()?;
    let t = znormalize(t, t).ok()?;
    Some((p, t))
}

pub fn accuracy_reward(pred: &[f64], truth: &[f64], cfg: &RewardConfig) -> f64 {
    let Some((p, t)) = normalized_overlap(pred, truth) else {
        return 0.0;
    };
    let d = pointwise_metric(cfg.accuracy_metric, &p, &t).expect("equal non-empty lengths");
    sigmoid_map(d, cfg.sigmoid_slope)
}

/// Largest odd window not exceeding `n`, capped at the configured window.
fn effective_window(configured: usize, n: usize) -> usize {
    let cap = if n % 2 == 1 { n } else { n - 1 };
    configured.min(cap).max(1)
}

/// Seasonal and trend MSEs of the normalized sequences, mapped per
/// `component_mode`.
pub fn component_rewards(pred: &[f64], truth: &[f64], cfg: &RewardConfig) -> (f64, f64) {
    let Some((m_s, m_t)) = component_errors(pred, truth, cfg) else {
        return (0.0, 0.0);
    };
    match cfg.component_mode {
        ComponentMode::SigmoidMapped => (
            cfg.component_coefficient * sigmoid_map(m_s, cfg.sigmoid_slope),
            cfg.component_coefficient * sigmoid_map(m_t, cfg.sigmoid_slope),
        ),
        ComponentMode::RawPenalty => (-m_s, -m_t),
    }
}

/// Raw `(seasonal MSE, trend MSE)` on the normalized overlap.
pub fn component_errors(pred: &[f64], truth: &[f64], cfg: &RewardConfig) -> Option<(f64, f64)> {
    let (p, t) = normalized_overlap(pred, truth)?;
    let w = effective_window(cfg.decomposition_window, p.len());
    let dp = decompose(&p, w).ok()?;
    let dt = decompose(&t, w).ok()?;
    let m_s = pointwise_metric(Metric::Mse, &dt.seasonal, &dp.seasonal).ok()?;
    let m_t = pointwise_metric(Metric::Mse, &dt.trend, &dp.trend).ok()?;
    Some((m_s, m_t))
}

const EXTREMA_CREDIT: f64 = 0.2;

pub fn changepoint_reward(pred: &[f64], truth: &[f64], cfg: &RewardConfig) -> f64 {
    let n = pred.len().min(truth.len());
    if n == 0 {
        return 0.0;
    }
    let ep = detect_extrema(&pred[..n]);
    let et = detect_extrema(&truth[..n]);
    let c = match_extrema(&ep, &et, cfg.extrema_tolerance);
    let part = |matched: usize, gt: usize, predicted: usize| {
        if gt == 0 {
            if predicted == 0 {
                EXTREMA_CREDIT
            } else {
                0.0
            }
        } else {
            matched as f64 / gt as f64 * EXTREMA_CREDIT
        }
    };
    part(c.matched_maxima, c.total_gt_maxima, c.total_pred_maxima)
        + part(c.matched_minima, c.total_gt_minima, c.total_pred_minima)
}

/// Scores an already-parsed completion against the ground-truth horizon.
pub fn score_parsed(parsed: &ParsedCompletion, truth: &[f64], cfg: &RewardConfig) -> RewardBreakdown {
    let en = &cfg.enabled;
    let rows = parsed.answer_rows.len();
    let mut b = RewardBreakdown {
        format: format_reward(parsed),
        length: length_reward(rows, truth.len()),
        ..Default::default()
    };
    if parsed.is_valid() {
        let pred = parsed.values();
        if en.accuracy {
            b.accuracy = accuracy_reward(&pred, truth, cfg);
        }
        if en.seasonal || en.trend {
            let (s, t) = component_rewards(&pred, truth, cfg);
            b.seasonal = s;
            b.trend = t;
        }
        if en.changepoint {
            b.changepoint = changepoint_reward(&pred, truth, cfg);
        }
    }
    b.with_total(en)
}

pub fn total_reward(raw_completion: &str, task: &ForecastTask, cfg: &RewardConfig) -> RewardBreakdown {
    score_parsed(&parse_completion(raw_completion), task.ground_truth(), cfg)
}
