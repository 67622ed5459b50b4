//! Task sources: the synthetic sine family used for desk-scale training, and
//! windowed slices of CSV datasets (`date,<channel>...`).

use std::io::Read;

use chrono::{Duration, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::derive_seed;
use crate::series::TimeSeries;
use crate::textio::{parse_timestamp_str, ForecastTask};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("header must be `date,<channel>...`, got `{0}`")]
    Header(String),
    #[error("line {line}: unparseable date `{value}`")]
    Date { line: usize, value: String },
    #[error("line {line}: column `{column}` is not a number")]
    Value { line: usize, column: String },
    #[error("unknown channel `{0}`")]
    Channel(String),
    #[error("need at least {needed} rows, dataset has {got}")]
    TooShort { needed: usize, got: usize },
    #[error("dates are not strictly increasing at line {0}")]
    Order(usize),
}

/// Rounds to the text precision so serialized values parse back exactly.
pub fn quantize(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SineTaskConfig {
    pub history: usize,
    pub horizon: usize,
    pub period: usize,
    pub amplitude: (f64, f64),
    pub offset: (f64, f64),
    /// Per-step drift range.
    pub trend: (f64, f64),
    pub noise: f64,
}

impl Default for SineTaskConfig {
    fn default() -> Self {
        Self {
            history: 16,
            horizon: 8,
            period: 8,
            amplitude: (1.0, 3.0),
            offset: (5.0, 15.0),
            trend: (-0.05, 0.05),
            noise: 0.1,
        }
    }
}

pub const SYNTHETIC_START: &str = "2016-07-01 00:00:00";

/// `offset + A·sin(2πt/P) + slope·t + noise`, phase-aligned at t = 0, hourly.
pub fn sine_task(cfg: &SineTaskConfig, index: usize, seed: u64) -> ForecastTask {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, index as u64]));
    let amp = rng.random_range(cfg.amplitude.0..=cfg.amplitude.1);
    let offset = rng.random_range(cfg.offset.0..=cfg.offset.1);
    let slope = rng.random_range(cfg.trend.0..=cfg.trend.1);
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("finite noise");
    let n = cfg.history + cfg.horizon;
    let values: Vec<f64> = (0..n)
        .map(|t| {
            let phase = 2.0 * std::f64::consts::PI * t as f64 / cfg.period as f64;
            quantize(offset + amp * phase.sin() + slope * t as f64 + noise.sample(&mut rng))
        })
        .collect();
    let start = parse_timestamp_str(SYNTHETIC_START).expect("valid constant");
    let history = TimeSeries::new(start, Duration::hours(1), values[..cfg.history].to_vec(), "hourly")
        .expect("finite synthetic values");
    let target = history.continuation(values[cfg.history..].to_vec()).expect("finite");
    ForecastTask::new(
        format!("sine-{seed}-{index}"),
        "synthetic sine",
        "a periodic signal with drift and noise",
        "value",
        "sensor reading",
        history,
        target,
    )
    .expect("contiguous by construction")
}

pub fn sine_tasks(cfg: &SineTaskConfig, n: usize, seed: u64) -> Vec<ForecastTask> {
    (0..n).map(|i| sine_task(cfg, i, seed)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub frequency: String,
    pub dates: Vec<NaiveDateTime>,
    pub channels: Vec<(String, Vec<f64>)>,
    /// Number of places where spacing differs from the first interval.
    pub gaps: usize,
}

impl Dataset {
    pub fn step(&self) -> Option<Duration> {
        (self.dates.len() >= 2).then(|| self.dates[1] - self.dates[0])
    }

    pub fn channel(&self, name: &str) -> Result<&[f64], DataError> {
        self.channels
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| DataError::Channel(name.to_string()))
    }
}

pub fn read_dataset(reader: impl Read, name: &str, frequency: &str) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 2 || !header[0].eq_ignore_ascii_case("date") {
        return Err(DataError::Header(header.iter().collect::<Vec<_>>().join(",")));
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut dates = Vec::new();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let d = parse_timestamp_str(&rec[0]).ok_or_else(|| DataError::Date {
            line,
            value: rec[0].to_string(),
        })?;
        if dates.last().is_some_and(|&p| d <= p) {
            return Err(DataError::Order(line));
        }
        dates.push(d);
        for (j, col) in cols.iter_mut().enumerate() {
            let v = rec
                .get(j + 1)
                .and_then(|s| s.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| DataError::Value {
                    line,
                    column: names[j].clone(),
                })?;
            col.push(v);
        }
    }
    let gaps = match dates.as_slice() {
        [a, b, ..] => {
            let step = *b - *a;
            dates.windows(2).filter(|w| w[1] - w[0] != step).count()
        }
        _ => 0,
    };
    Ok(Dataset {
        name: name.to_string(),
        frequency: frequency.to_string(),
        dates,
        channels: names.into_iter().zip(cols).collect(),
        gaps,
    })
}

/// Sliding `(history, horizon)` windows over one channel, every `stride`
/// rows. Windows that straddle irregular spacing are skipped.
pub fn window_tasks(
    ds: &Dataset,
    channel: &str,
    history: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<ForecastTask>, DataError> {
    let values = ds.channel(channel)?;
    let need = history + horizon;
    if values.len() < need || need < 2 {
        return Err(DataError::TooShort {
            needed: need.max(2),
            got: values.len(),
        });
    }
    let step = ds.step().expect("at least two rows");
    let mut out = Vec::new();
    let mut s = 0;
    while s + need <= values.len() {
        let regular = ds.dates[s..s + need].windows(2).all(|w| w[1] - w[0] == step);
        if regular {
            let h = TimeSeries::new(ds.dates[s], step, values[s..s + history].to_vec(), ds.frequency.clone())
                .expect("validated values");
            let t = h
                .continuation(values[s + history..s + need].to_vec())
                .expect("validated values");
            let task = ForecastTask::new(
                format!("{}-{channel}-{s}", ds.name),
                &ds.name,
                "",
                channel,
                channel,
                h,
                t,
            )
            .expect("contiguous window");
            out.push(task);
        }
        s += stride.max(1);
    }
    Ok(out)
}
