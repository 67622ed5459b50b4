//! Reasoning-data construction and the supervised warm-up.
//!
//! Per task: draw candidate completions from a provider, keep the one with
//! the lowest MAPE, ask the provider to rewrite its reasoning so that it ends
//! at the true values, then pair that reasoning with the ground truth.

use std::io::Write;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{compact_think, encode_completion, encode_prompt};
use crate::policy::{PolicyParams, Token, Vocab};
use crate::seed::derive_seed;
use crate::series::{mean, pointwise_metric, Metric};
use crate::textio::{
    parse_completion, render_completion, render_prompt, serialize_series, ForecastTask, ParsedCompletion, Row,
    ANSWER_OPEN, THINK_CLOSE, THINK_OPEN, VALUE_PRECISION,
};

/// Environment variable holding the remote API key.
pub const API_KEY_ENV: &str = "TIME_R1_API_KEY";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("{API_KEY_ENV} is not set")]
    MissingCredential,
    #[error("request failed after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("server returned HTTP {status} after {attempts} attempts")]
    Status { status: u16, attempts: u32 },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Error)]
pub enum SftError {
    #[error("task {task_id}: no candidate has a parseable answer")]
    NoViableCandidate { task_id: String },
    #[error("task {task_id}: {source}")]
    Provider { task_id: String, source: ProviderError },
    #[error("no tasks given")]
    NoTasks,
    #[error("writing dataset: {0}")]
    Io(#[from] std::io::Error),
}

/// Source of completions. Implementations must be deterministic in `seed`
/// where they can be.
pub trait CompletionProvider: Sync {
    /// One forecast completion for the rendered prompt.
    fn candidate(&self, task: &ForecastTask, prompt: &str, seed: u64) -> Result<String, ProviderError>;

    /// Reasoning rewritten towards the true values.
    fn revise(
        &self,
        task: &ForecastTask,
        revision_prompt: &str,
        best_cot: &str,
        seed: u64,
    ) -> Result<String, ProviderError>;
}

/// Offline teacher: templated reasoning plus ground truth with Gaussian
/// noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTeacher {
    pub noise_scale: f64,
    /// Number of phrasing variants to rotate through (1..=3).
    pub templates: usize,
}

impl Default for SyntheticTeacher {
    fn default() -> Self {
        Self {
            noise_scale: 0.3,
            templates: 3,
        }
    }
}

struct HistorySummary {
    first: f64,
    last: f64,
    min: f64,
    max: f64,
    mean: f64,
    slope: f64,
    lag: usize,
    acf: f64,
}

fn summarize(values: &[f64]) -> HistorySummary {
    let n = values.len();
    let m = mean(values);
    let tx = (n as f64 - 1.0) / 2.0;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, v) in values.iter().enumerate() {
        sxy += (i as f64 - tx) * (v - m);
        sxx += (i as f64 - tx).powi(2);
    }
    let var: f64 = values.iter().map(|v| (v - m).powi(2)).sum();
    let (mut lag, mut acf) = (0, 0.0);
    for l in 2..=n / 2 {
        let c: f64 = (l..n).map(|i| (values[i] - m) * (values[i - l] - m)).sum::<f64>() / var.max(1e-12);
        if lag == 0 || c > acf {
            lag = l;
            acf = c;
        }
    }
    HistorySummary {
        first: values[0],
        last: values[n - 1],
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean: m,
        slope: if sxx > 0.0 { sxy / sxx } else { 0.0 },
        lag,
        acf,
    }
}

fn direction(slope: f64) -> &'static str {
    if slope > 1e-9 {
        "rising"
    } else if slope < -1e-9 {
        "falling"
    } else {
        "flat"
    }
}

fn extent(values: &[f64]) -> (f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

impl SyntheticTeacher {
    fn cot(&self, task: &ForecastTask, forecast: &[f64], variant: usize) -> String {
        let s = summarize(task.history.values());
        let (lo, hi) = extent(forecast);
        let p = VALUE_PRECISION;
        let h = task.horizon();
        match variant % self.templates.clamp(1, 3) {
            0 => format!(
                "1. Level and trend: the window runs from {:.p$} to {:.p$}, {} at about {:.p$} per step.\n\
                 2. Periodicity: autocorrelation peaks at lag {} ({:.2}), so that cycle should repeat.\n\
                 3. Range: observed values span [{:.p$}, {:.p$}] around a mean of {:.p$}.\n\
                 4. Projection: continue the last cycle from the current level plus the drift.\n\
                 Conclusion: the next {h} values should lie between {lo:.p$} and {hi:.p$}.",
                s.first,
                s.last,
                direction(s.slope),
                s.slope,
                s.lag,
                s.acf,
                s.min,
                s.max,
                s.mean
            ),
            1 => format!(
                "1. Recent behaviour: last reading {:.p$}, net drift {:.p$} per step ({}).\n\
                 2. Repetition: strongest self-similarity at a shift of {} steps.\n\
                 3. Bounds: history min {:.p$}, max {:.p$}.\n\
                 4. Plan: replay one period and add the drift.\n\
                 Conclusion: forecast range {lo:.p$} to {hi:.p$} over {h} steps.",
                s.last,
                s.slope,
                direction(s.slope),
                s.lag,
                s.min,
                s.max
            ),
            _ => format!(
                "1. Mean {:.p$}; the series is {} overall.\n\
                 2. A period near {} steps dominates (score {:.2}).\n\
                 3. Extremes so far: {:.p$} and {:.p$}; latest {:.p$}.\n\
                 4. Extend the pattern forward from the latest value.\n\
                 Conclusion: expect a low of {lo:.p$} and a high of {hi:.p$}.",
                s.mean,
                direction(s.slope),
                s.lag,
                s.acf,
                s.min,
                s.max,
                s.last
            ),
        }
    }

    pub fn forecast(&self, task: &ForecastTask, seed: u64) -> Vec<f64> {
        let truth = task.ground_truth();
        if self.noise_scale <= 0.0 {
            return truth.to_vec();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, self.noise_scale).expect("positive noise scale");
        truth.iter().map(|v| v + n.sample(&mut rng)).collect()
    }
}

fn future_rows(task: &ForecastTask, values: &[f64]) -> Vec<Row> {
    task.future_timestamps()
        .into_iter()
        .zip(values.iter().copied())
        .collect()
}

impl CompletionProvider for SyntheticTeacher {
    fn candidate(&self, task: &ForecastTask, _prompt: &str, seed: u64) -> Result<String, ProviderError> {
        let forecast = self.forecast(task, seed);
        let cot = self.cot(task, &forecast, (seed % 3) as usize);
        Ok(render_completion(&cot, &future_rows(task, &forecast), VALUE_PRECISION))
    }

    fn revise(&self, task: &ForecastTask, _prompt: &str, best_cot: &str, _seed: u64) -> Result<String, ProviderError> {
        let truth = task.ground_truth();
        let (lo, hi) = extent(truth);
        let keep: Vec<&str> = best_cot
            .lines()
            .filter(|l| !l.trim_start().starts_with("Conclusion"))
            .collect();
        let p = VALUE_PRECISION;
        let last = truth[truth.len() - 1];
        Ok(format!(
            "{}\nConclusion: over the next {} steps the series reaches a high of {hi:.p$} and a low of {lo:.p$}, ending at {last:.p$}.",
            keep.join("\n"),
            truth.len()
        ))
    }
}

/// Chat-completions client. The key is read from [`API_KEY_ENV`] only.
pub struct RemoteProvider {
    pub base_url: String,
    pub model: String,
    pub temperature: f64,
    pub timeout: Duration,
    pub retries: u32,
    pub backoff_base: Duration,
    api_key: String,
    client: reqwest::blocking::Client,
}

impl std::fmt::Debug for RemoteProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteProvider")
            .field("base_url", &self.base_url)
            .field("model", &self.model)
            .field("temperature", &self.temperature)
            .field("timeout", &self.timeout)
            .field("retries", &self.retries)
            .finish_non_exhaustive()
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
}

impl RemoteProvider {
    /// Fails before any network activity if the key is absent or empty.
    pub fn from_env(base_url: &str, model: &str, temperature: f64, timeout: Duration) -> Result<Self, ProviderError> {
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.trim().is_empty());
        let key = key.ok_or(ProviderError::MissingCredential)?;
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ProviderError::Other(e.to_string()))?;
        Ok(Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            temperature,
            timeout,
            retries: 3,
            backoff_base: Duration::from_secs(1),
            api_key: key,
            client,
        })
    }

    pub fn with_backoff(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    pub fn chat(&self, content: &str) -> Result<String, ProviderError> {
        let url = format!("{}/chat/completions", self.base_url);
        let body = ChatRequest {
            model: &self.model,
            messages: vec![ChatMessage { role: "user", content }],
            temperature: self.temperature,
        };
        let mut attempt = 0;
        loop {
            attempt += 1;
            let res = self.client.post(&url).bearer_auth(&self.api_key).json(&body).send();
            let retryable = match res {
                Ok(r) if r.status().is_success() => {
                    let v: serde_json::Value = r.json().map_err(|e| ProviderError::Malformed(e.to_string()))?;
                    return v["choices"][0]["message"]["content"]
                        .as_str()
                        .map(str::to_string)
                        .ok_or_else(|| ProviderError::Malformed("missing choices[0].message.content".into()));
                }
                Ok(r) if r.status().is_server_error() || r.status().as_u16() == 429 => ProviderError::Status {
                    status: r.status().as_u16(),
                    attempts: attempt,
                },
                Ok(r) => {
                    return Err(ProviderError::Status {
                        status: r.status().as_u16(),
                        attempts: attempt,
                    })
                }
                Err(e) => ProviderError::Transport {
                    attempts: attempt,
                    message: e.without_url().to_string(),
                },
            };
            if attempt > self.retries {
                return Err(retryable);
            }
            std::thread::sleep(self.backoff_base * 2u32.pow(attempt - 1));
        }
    }
}

impl CompletionProvider for RemoteProvider {
    fn candidate(&self, _task: &ForecastTask, prompt: &str, _seed: u64) -> Result<String, ProviderError> {
        self.chat(prompt)
    }

    fn revise(
        &self,
        _task: &ForecastTask,
        revision_prompt: &str,
        _best: &str,
        _seed: u64,
    ) -> Result<String, ProviderError> {
        self.chat(revision_prompt)
    }
}

pub const REVISION_PROMPT_VERSION: &str = "revise-v1";

/// Fixed revision request (version [`REVISION_PROMPT_VERSION`]).
pub fn revision_prompt(task: &ForecastTask, best_cot: &str) -> String {
    format!(
        "[{REVISION_PROMPT_VERSION}] Below are past observations of {} ({}), a draft analysis, and the values that \
         actually followed.\nPast observations:\n```\n{}```\nDraft analysis:\n{}\nActual next {} values:\n```\n{}```\n\
         Rewrite the analysis so that its reasoning leads to the actual values. Keep the same structure, cite the \
         actual highest and lowest values, and return only the rewritten analysis inside {THINK_OPEN}...{THINK_CLOSE}.",
        task.channel_info,
        task.channel_name,
        serialize_series(&task.history, VALUE_PRECISION),
        best_cot.trim(),
        task.horizon(),
        serialize_series(&task.target, VALUE_PRECISION),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub text: String,
    pub parsed: ParsedCompletion,
}

impl Candidate {
    pub fn new(text: String) -> Self {
        let parsed = parse_completion(&text);
        Self { text, parsed }
    }

    /// Has at least one answer row to score.
    pub fn viable(&self) -> bool {
        !self.parsed.answer_rows.is_empty()
    }
}

pub fn generate_candidates(
    provider: &dyn CompletionProvider,
    task: &ForecastTask,
    n: usize,
    seed: u64,
) -> Result<Vec<Candidate>, ProviderError> {
    let prompt = render_prompt(task);
    (0..n)
        .map(|i| {
            provider
                .candidate(task, &prompt, derive_seed(&[seed, i as u64]))
                .map(Candidate::new)
        })
        .collect()
}

/// MAPE of the overlapping prefix, or `None` for non-viable candidates.
pub fn candidate_mape(c: &Candidate, truth: &[f64]) -> Option<f64> {
    if !c.viable() {
        return None;
    }
    let pred = c.parsed.values();
    let n = pred.len().min(truth.len());
    pointwise_metric(Metric::Mape, &pred[..n], &truth[..n]).ok()
}

/// Index of the lowest-MAPE viable candidate; ties keep the earlier one.
pub fn select_best_mape(candidates: &[Candidate], truth: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        if let Some(m) = candidate_mape(c, truth) {
            if best.is_none_or(|(_, b)| m < b) {
                best = Some((i, m));
            }
        }
    }
    best.map(|(i, _)| i)
}

const EMPTY_COT_FLOOR: &str = "The forecast continues the recent level and pattern of the series.";

/// Think text of a provider reply: the inside of the think block if present,
/// never anything from an answer block onward.
pub fn extract_cot(reply: &str) -> String {
    let mut text = reply;
    if let Some(i) = text.find(ANSWER_OPEN) {
        text = &text[..i];
    }
    if let Some(o) = text.find(THINK_OPEN) {
        text = &text[o + THINK_OPEN.len()..];
    }
    if let Some(c) = text.find(THINK_CLOSE) {
        text = &text[..c];
    }
    let t = text.replace(THINK_OPEN, "").replace(THINK_CLOSE, "").trim().to_string();
    if t.is_empty() {
        EMPTY_COT_FLOOR.to_string()
    } else {
        t
    }
}

pub fn revise_cot(
    provider: &dyn CompletionProvider,
    task: &ForecastTask,
    best_cot: &str,
    seed: u64,
) -> Result<String, ProviderError> {
    let base = if best_cot.trim().is_empty() {
        EMPTY_COT_FLOOR
    } else {
        best_cot
    };
    let reply = provider.revise(task, &revision_prompt(task, base), base, seed)?;
    Ok(extract_cot(&reply))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftSample {
    pub task_id: String,
    pub prompt: String,
    pub completion: String,
}

pub fn assemble_sample(cot: &str, task: &ForecastTask) -> SftSample {
    SftSample {
        task_id: task.id.clone(),
        prompt: render_prompt(task),
        completion: render_completion(cot, &task.target.rows(), VALUE_PRECISION),
    }
}

/// One task through the whole pipeline.
pub fn build_sample(
    provider: &dyn CompletionProvider,
    task: &ForecastTask,
    n_candidates: usize,
    seed: u64,
) -> Result<SftSample, SftError> {
    let wrap = |source| SftError::Provider {
        task_id: task.id.clone(),
        source,
    };
    let candidates = generate_candidates(provider, task, n_candidates, seed).map_err(wrap)?;
    let best = select_best_mape(&candidates, task.ground_truth()).ok_or_else(|| SftError::NoViableCandidate {
        task_id: task.id.clone(),
    })?;
    let cot = revise_cot(
        provider,
        task,
        &candidates[best].parsed.think_text,
        derive_seed(&[seed, u64::MAX]),
    )
    .map_err(wrap)?;
    Ok(assemble_sample(&cot, task))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftBuildReport {
    pub written: usize,
    /// `(task_id, reason)` for every task without a sample.
    pub skipped: Vec<(String, String)>,
}

/// Builds one sample per task and writes them as JSON lines in task order.
/// Failing tasks are reported, never silently dropped.
pub fn build_sft_dataset(
    tasks: &[ForecastTask],
    provider: &dyn CompletionProvider,
    n_candidates: usize,
    seed: u64,
    mut out: impl Write,
) -> Result<(Vec<SftSample>, SftBuildReport), SftError> {
    if tasks.is_empty() {
        return Err(SftError::NoTasks);
    }
    let results: Vec<Result<SftSample, SftError>> = tasks
        .par_iter()
        .enumerate()
        .map(|(i, t)| build_sample(provider, t, n_candidates.max(1), derive_seed(&[seed, i as u64])))
        .collect();
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for (task, r) in tasks.iter().zip(results) {
        match r {
            Ok(s) => {
                serde_json::to_writer(&mut out, &s).map_err(std::io::Error::from)?;
                out.write_all(b"\n")?;
                samples.push(s);
            }
            Err(e) => skipped.push((task.id.clone(), e.to_string())),
        }
    }
    out.flush()?;
    let report = SftBuildReport {
        written: samples.len(),
        skipped,
    };
    Ok((samples, report))
}

pub fn read_sft_dataset(text: &str) -> Result<Vec<SftSample>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

/// A training pair in compact tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactSample {
    pub prompt: Vec<Token>,
    pub completion: Vec<Token>,
}

/// Compact form of a sample: teacher think tokens and the sample's answer
/// values on the task's bin scale.
pub fn compact_sample(sample: &SftSample, task: &ForecastTask, vocab: &Vocab) -> CompactSample {
    let prompt = encode_prompt(task, vocab);
    let think = compact_think(task, &prompt.scale, vocab);
    let answer = parse_completion(&sample.completion).values();
    CompactSample {
        completion: encode_completion(&think, &answer, &prompt.scale, vocab),
        prompt: prompt.tokens,
    }
}

pub fn dataset_loglik(params: &PolicyParams, data: &[CompactSample]) -> f64 {
    data.iter()
        .map(|s| params.logprobs(&s.prompt, &s.completion).iter().sum::<f64>())
        .sum()
}

/// Per-sample gradient ascent on completion log-likelihood, in dataset order.
pub fn sft_update(params: &PolicyParams, data: &[CompactSample], learning_rate: f64, epochs: usize) -> PolicyParams {
    let mut p = params.clone();
    for _ in 0..epochs {
        for s in data {
            let g = p.grad_logprob_sequence(&s.prompt, &s.completion);
            p.weights.add_scaled(&g, learning_rate);
        }
    }
    p
}
