//! Training loop: rollout, reward, selection and update for GRIP and GRPO,
//! greedy evaluation (single window or rolling), metrics and checkpoints.
//!
//! Every random draw is keyed by `derive_seed(&[seed, stream, ...])`, so a run
//! is a pure function of its config and seed, whatever the worker count.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{decode_completion, encode_prompt, BinScale, CompactPrompt, THINK_LEN};
use crate::config::{ConfigError, Layered};
use crate::data::{sine_task, SineTaskConfig};
use crate::grip::{grip_gradient, select_elites, CandidatePool, GripConfig, GripError};
use crate::grpo::{grpo_gradient, kl_k3, GroupBatch, GrpoError};
use crate::policy::{
    completion_layout, Checkpoint, FrozenPolicy, PolicyError, PolicyParams, PolicyShape, Token, TrajectoryRecord, Vocab,
};
use crate::reward::{score_parsed, RewardBreakdown, RewardConfig};
use crate::seed::derive_seed;
use crate::series::{pointwise_metric, Metric};
use crate::sft::{build_sft_dataset, compact_sample, sft_update, SftError, SyntheticTeacher};
use crate::textio::ForecastTask;

const STREAM_TRAIN: u64 = 1;
const STREAM_EVAL: u64 = 2;
const STREAM_ROLLOUT: u64 = 3;
const STREAM_SELECT: u64 = 4;
const STREAM_SFT: u64 = 5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Layered(#[from] ConfigError),
    #[error(transparent)]
    Grip(#[from] GripError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Sft(#[from] SftError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("evaluation: {0}")]
    Eval(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    Grip,
    Grpo,
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::Grip => "grip",
            Algorithm::Grpo => "grpo",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub bins: usize,
    pub context_order: usize,
    pub position_buckets: usize,
    pub value_lags: Vec<usize>,
    /// Bias towards the well-formed token layout at initialization.
    pub prior_strength: f64,
    pub temperature: f64,
    pub max_completion: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            bins: 32,
            context_order: 2,
            position_buckets: 16,
            value_lags: vec![8],
            prior_strength: 6.0,
            temperature: 1.0,
            max_completion: 24,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub samples: usize,
    pub n_candidates: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub teacher_noise: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            samples: 300,
            n_candidates: 5,
            learning_rate: 0.05,
            epochs: 1,
            teacher_noise: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    /// Desk-scale step size; 7B-parameter models use 1e-6.
    pub learning_rate: f64,
    pub updates: usize,
    pub tasks_per_batch: usize,
    pub seed: u64,
    pub sft_warmup: bool,
    pub eval_every: usize,
    pub eval_tasks: usize,
    /// Rolling windows used for the periodic evaluation (1 = single window).
    pub eval_windows: usize,
    /// Off by default so metrics files are byte-identical across runs.
    pub record_elapsed: bool,
    pub grip: GripConfig,
    pub reward: RewardConfig,
    pub task: SineTaskConfig,
    pub policy: PolicyConfig,
    pub sft: SftConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Grip,
            learning_rate: 0.05,
            updates: 200,
            tasks_per_batch: 16,
            seed: 0,
            sft_warmup: false,
            eval_every: 10,
            eval_tasks: 64,
            eval_windows: 1,
            record_elapsed: false,
            grip: GripConfig::default(),
            reward: RewardConfig::default(),
            task: SineTaskConfig::default(),
            policy: PolicyConfig::default(),
            sft: SftConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.tasks_per_batch == 0 {
            return bad("tasks_per_batch must be >= 1".into());
        }
        if self.eval_every == 0 || self.eval_tasks == 0 || self.eval_windows == 0 {
            return bad("eval_every, eval_tasks and eval_windows must be >= 1".into());
        }
        let t = &self.task;
        if t.history < 2 || t.horizon < 1 || t.period < 1 {
            return bad("task needs history >= 2, horizon >= 1, period >= 1".into());
        }
        if !(t.amplitude.0 <= t.amplitude.1 && t.offset.0 <= t.offset.1 && t.trend.0 <= t.trend.1) {
            return bad("task ranges must be ordered (low, high)".into());
        }
        let p = &self.policy;
        if p.bins < 2 || p.bins > u16::MAX as usize || p.position_buckets == 0 || p.max_completion == 0 {
            return bad("policy needs bins in 2..=65535, position_buckets >= 1, max_completion >= 1".into());
        }
        if p.value_lags.contains(&0) {
            return bad("policy.value_lags entries must be >= 1".into());
        }
        if !(p.temperature > 0.0) {
            return bad(format!("policy.temperature must be positive, got {}", p.temperature));
        }
        if self.sft_warmup && (self.sft.samples == 0 || !(self.sft.learning_rate >= 0.0)) {
            return bad("sft warm-up needs samples >= 1 and a non-negative learning rate".into());
        }
        self.grip.validate()?;
        self.reward.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }

    /// Completions sampled per task: `k·G` for GRIP, `G` for GRPO.
    pub fn completions_per_task(&self) -> usize {
        match self.algorithm {
            Algorithm::Grip => self.grip.pool_size(),
            Algorithm::Grpo => self.grip.group_size,
        }
    }

    pub fn shape(&self) -> PolicyShape {
        let p = &self.policy;
        PolicyShape::new(Vocab::uniform(p.bins), p.context_order, p.position_buckets)
            .with_value_lags(p.value_lags.clone())
    }

    pub fn initial_policy(&self) -> PolicyParams {
        PolicyParams::format_prior(self.shape(), THINK_LEN, self.task.horizon, self.policy.prior_strength)
    }

    /// Layout length of a well-formed completion.
    pub fn completion_len(&self) -> usize {
        completion_layout(THINK_LEN, self.task.horizon).len()
    }

    pub fn train_task(&self, update: usize, slot: usize) -> ForecastTask {
        let index = update * self.tasks_per_batch + slot;
        sine_task(&self.task, index, derive_seed(&[self.seed, STREAM_TRAIN]))
    }

    /// Held-out tasks whose targets cover `eval_windows` horizons.
    pub fn eval_task_set(&self) -> Vec<ForecastTask> {
        let cfg = SineTaskConfig {
            horizon: self.task.horizon * self.eval_windows,
            ..self.task.clone()
        };
        let seed = derive_seed(&[self.seed, STREAM_EVAL]);
        (0..self.eval_tasks).map(|i| sine_task(&cfg, i, seed)).collect()
    }
}

/// Sampled completions for one task.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub task: ForecastTask,
    pub prompt: CompactPrompt,
    pub pool: Vec<TrajectoryRecord>,
}

/// Samples `n` completions per task from `old` at the configured temperature
/// and scores them. Trajectory `j` of task `i` uses seed
/// `derive_seed(&[stream, i, j])`.
pub fn rollout(
    old: &FrozenPolicy,
    reference: &FrozenPolicy,
    tasks: &[ForecastTask],
    n: usize,
    cfg: &TrainConfig,
    stream: u64,
) -> Result<Vec<Rollout>, TrainError> {
    let vocab = old.params().vocab().clone();
    tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let prompt = encode_prompt(task, &vocab);
            let shared: Arc<[Token]> = prompt.tokens.clone().into();
            let pool = (0..n)
                .into_par_iter()
                .map(|j| {
                    let seed = derive_seed(&[stream, i as u64, j as u64]);
                    let (tokens, _) = old.params().sample_completion(
                        &shared,
                        cfg.policy.temperature,
                        cfg.policy.max_completion,
                        seed,
                    )?;
                    let parsed = decode_completion(&tokens, task, &prompt.scale, &vocab);
                    let breakdown = score_parsed(&parsed, task.ground_truth(), &cfg.reward);
                    Ok(TrajectoryRecord::new(
                        task.id.clone(),
                        shared.clone(),
                        tokens,
                        old.params(),
                        reference.params(),
                        breakdown,
                    ))
                })
                .collect::<Result<Vec<_>, PolicyError>>()?;
            Ok(Rollout {
                task: task.clone(),
                prompt,
                pool,
            })
        })
        .collect()
}

/// Training statistics of one update, computed from the rollout.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    pub mean_reward: f64,
    pub breakdown: RewardBreakdown,
    pub kl_mean: f64,
}

fn step_stats(rollouts: &[Rollout]) -> StepStats {
    let all: Vec<&TrajectoryRecord> = rollouts.iter().flat_map(|r| &r.pool).collect();
    let n = all.len().max(1) as f64;
    let mean = |f: fn(&RewardBreakdown) -> f64| all.iter().map(|t| f(&t.breakdown)).sum::<f64>() / n;
    let (mut kl, mut tokens) = (0.0, 0usize);
    for t in &all {
        for (r, c) in t.logp_ref.iter().zip(&t.logp_current) {
            kl += kl_k3(*r, *c);
        }
        tokens += t.tokens.len();
    }
    StepStats {
        mean_reward: all.iter().map(|t| t.reward).sum::<f64>() / n,
        breakdown: RewardBreakdown {
            format: mean(|b| b.format),
            length: mean(|b| b.length),
            accuracy: mean(|b| b.accuracy),
            seasonal: mean(|b| b.seasonal),
            trend: mean(|b| b.trend),
            changepoint: mean(|b| b.changepoint),
            total: mean(|b| b.total),
        },
        kl_mean: kl / tokens.max(1) as f64,
    }
}

/// One optimizer step: per task, GRPO uses its whole group while GRIP selects
/// elites from the pool; task gradients are averaged and ascended by
/// `learning_rate`. Elite selection for task `i` draws from
/// `derive_seed(&[stream, i])`.
pub fn rl_step(
    rollouts: &[Rollout],
    cfg: &TrainConfig,
    params: &PolicyParams,
    learning_rate: f64,
    stream: u64,
) -> Result<(PolicyParams, StepStats), TrainError> {
    let stats = step_stats(rollouts);
    let mut params = params.clone();
    if rollouts.is_empty() {
        return Ok((params, stats));
    }
    let mut total = None;
    for (i, r) in rollouts.iter().enumerate() {
        let g = match cfg.algorithm {
            Algorithm::Grpo => {
                let batch = GroupBatch::new(r.pool.clone(), cfg.grip.epsilon_clip, cfg.grip.beta_kl)?;
                grpo_gradient(&batch, &params)?
            }
            Algorithm::Grip => {
                let pool = CandidatePool::new(r.pool.clone(), &cfg.grip)?;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[stream, i as u64]));
                let sel = select_elites(&pool, &cfg.grip, &mut rng);
                grip_gradient(&sel, &cfg.grip, &params)?
            }
        };
        match total.as_mut() {
            None => total = Some(g),
            Some(t) => t.add_scaled(&g, 1.0),
        }
    }
    let total = total.expect("non-empty rollouts");
    params.weights.add_scaled(&total, learning_rate / rollouts.len() as f64);
    Ok((params, stats))
}

/// How evaluation windows are laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    SingleWindow,
    /// Forecast `windows` consecutive horizons, feeding each decoded horizon
    /// back as history.
    Rolling {
        windows: usize,
    },
}

impl EvalMode {
    pub fn windows(&self) -> usize {
        match self {
            EvalMode::SingleWindow => 1,
            EvalMode::Rolling { windows } => *windows,
        }
    }
}

/// One evaluated window. `mse`/`mae` are `None` on a format failure.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub task_id: String,
    pub window: usize,
    pub mse: Option<f64>,
    pub mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub records: Vec<EvalRecord>,
    /// Means over windows that decoded; NaN when none did.
    pub mse: f64,
    pub mae: f64,
    pub format_failures: usize,
}

/// What a decoder sees for one evaluation window.
pub struct EvalWindow<'a> {
    pub task: &'a ForecastTask,
    pub prompt: &'a CompactPrompt,
}

/// Greedy evaluation of `params` on the first `horizon` (single) or
/// `windows·horizon` (rolling) target steps of each task. Predictions are
/// bin centers in original units.
pub fn evaluate(
    params: &PolicyParams,
    tasks: &[ForecastTask],
    mode: EvalMode,
    horizon: usize,
    max_len: usize,
) -> Result<EvalSummary, TrainError> {
    evaluate_with(
        |w: &EvalWindow| params.greedy_completion(&w.prompt.tokens, max_len),
        params.vocab(),
        tasks,
        mode,
        horizon,
    )
}

/// [`evaluate`] with an arbitrary decoder.
pub fn evaluate_with<D>(
    decode: D,
    vocab: &Vocab,
    tasks: &[ForecastTask],
    mode: EvalMode,
    horizon: usize,
) -> Result<EvalSummary, TrainError>
where
    D: Fn(&EvalWindow) -> Vec<Token> + Sync,
{
    if tasks.is_empty() {
        return Err(TrainError::Eval("no evaluation tasks".into()));
    }
    let windows = mode.windows();
    if horizon == 0 || windows == 0 {
        return Err(TrainError::Eval("horizon and windows must be positive".into()));
    }
    let per_task: Vec<Vec<EvalRecord>> = tasks
        .par_iter()
        .map(|task| eval_task(&decode, vocab, task, windows, horizon))
        .collect::<Result<_, _>>()?;
    let records: Vec<EvalRecord> = per_task.into_iter().flatten().collect();
    let ok: Vec<&EvalRecord> = records.iter().filter(|r| r.mse.is_some()).collect();
    let avg = |f: fn(&EvalRecord) -> Option<f64>| {
        if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().filter_map(|r| f(r)).sum::<f64>() / ok.len() as f64
        }
    };
    Ok(EvalSummary {
        mse: avg(|r| r.mse),
        mae: avg(|r| r.mae),
        format_failures: records.len() - ok.len(),
        records,
    })
}

fn eval_task<D>(
    decode: &D,
    vocab: &Vocab,
    task: &ForecastTask,
    windows: usize,
    horizon: usize,
) -> Result<Vec<EvalRecord>, TrainError>
where
    D: Fn(&EvalWindow) -> Vec<Token>,
{
    let truth_all = task.ground_truth();
    if truth_all.len() < windows * horizon {
        return Err(TrainError::Eval(format!(
            "task {} has {} target steps, need {}",
            task.id,
            truth_all.len(),
            windows * horizon
        )));
    }
    let hist_len = task.history.len();
    let mut stream: Vec<f64> = task.history.values().to_vec();
    let mut out = Vec::with_capacity(windows);
    for w in 0..windows {
        let hist = stream[stream.len() - hist_len..].to_vec();
        let start = task.history.timestamp(w * horizon);
        let history = crate::series::TimeSeries::new(start, task.history.step(), hist, task.history.frequency())
            .map_err(|e| TrainError::Eval(e.to_string()))?;
        let truth = &truth_all[w * horizon..(w + 1) * horizon];
        let target = history
            .continuation(truth.to_vec())
            .map_err(|e| TrainError::Eval(e.to_string()))?;
        let wt = ForecastTask::new(
            task.id.clone(),
            &task.dataset_name,
            &task.dataset_description,
            &task.channel_name,
            &task.channel_info,
            history,
            target,
        )
        .map_err(|e| TrainError::Eval(e.to_string()))?;
        let prompt = encode_prompt(&wt, vocab);
        let tokens = decode(&EvalWindow {
            task: &wt,
            prompt: &prompt,
        });
        let pred = decode_completion(&tokens, &wt, &prompt.scale, vocab).values();
        let (mse, mae, fed) = if pred.is_empty() {
            // keep rolling from a flat continuation
            let last = *stream.last().expect("non-empty history");
            (None, None, vec![last; horizon])
        } else {
            let mut p = pred;
            p.truncate(horizon);
            let last = *p.last().expect("non-empty");
            p.resize(horizon, last);
            let mse = pointwise_metric(Metric::Mse, &p, truth).map_err(|e| TrainError::Eval(e.to_string()))?;
            let mae = pointwise_metric(Metric::Mae, &p, truth).map_err(|e| TrainError::Eval(e.to_string()))?;
            (Some(mse), Some(mae), p)
        };
        stream.extend(fed);
        out.push(EvalRecord {
            task_id: task.id.clone(),
            window: w,
            mse,
            mae,
        });
    }
    Ok(out)
}

/// One row of `metrics.csv`. Training columns are empty on the initial
/// evaluation row; eval columns are empty between evaluations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsRecord {
    pub update_index: usize,
    pub train: Option<StepStats>,
    pub eval_mse: Option<f64>,
    pub eval_mae: Option<f64>,
    pub elapsed_seconds: f64,
}

pub const METRICS_CSV_HEADER: &str = "update_index,mean_reward,format_mean,length_mean,accuracy_mean,seasonal_mean,trend_mean,changepoint_mean,kl_mean,eval_mse,eval_mae,elapsed_seconds";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        let t = self.train;
        let b = t.map(|s| s.breakdown);
        [
            self.update_index.to_string(),
            opt(t.map(|s| s.mean_reward)),
            opt(b.map(|b| b.format)),
            opt(b.map(|b| b.length)),
            opt(b.map(|b| b.accuracy)),
            opt(b.map(|b| b.seasonal)),
            opt(b.map(|b| b.trend)),
            opt(b.map(|b| b.changepoint)),
            opt(t.map(|s| s.kl_mean)),
            opt(self.eval_mse),
            opt(self.eval_mae),
            self.elapsed_seconds.to_string(),
        ]
        .join(",")
    }
}

/// Supervised warm-up on synthetic-teacher samples for `cfg.sft.samples`
/// fresh tasks.
pub fn sft_warmup(params: &PolicyParams, cfg: &TrainConfig) -> Result<PolicyParams, TrainError> {
    let seed = derive_seed(&[cfg.seed, STREAM_SFT]);
    let tasks: Vec<ForecastTask> = (0..cfg.sft.samples).map(|i| sine_task(&cfg.task, i, seed)).collect();
    let teacher = SyntheticTeacher {
        noise_scale: cfg.sft.teacher_noise,
        ..Default::default()
    };
    let (samples, _) = build_sft_dataset(&tasks, &teacher, cfg.sft.n_candidates, seed, io::sink())?;
    let data: Vec<_> = samples
        .iter()
        .map(|s| {
            let task = tasks
                .iter()
                .find(|t| t.id == s.task_id)
                .expect("sample of a known task");
            compact_sample(s, task, params.vocab())
        })
        .collect();
    Ok(sft_update(params, &data, cfg.sft.learning_rate, cfg.sft.epochs))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub records: Vec<MetricsRecord>,
}

/// Runs the full loop in memory, handing each metrics row to `sink` as soon
/// as it exists. On error the rows emitted so far have already been sunk.
pub fn train(
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(&MetricsRecord) -> io::Result<()>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let clock = Instant::now();
    let elapsed = || {
        if cfg.record_elapsed {
            clock.elapsed().as_secs_f64()
        } else {
            0.0
        }
    };
    let mut params = cfg.initial_policy();
    if cfg.sft_warmup {
        params = sft_warmup(&params, cfg)?;
    }
    let reference = params.snapshot();
    let eval_tasks = cfg.eval_task_set();
    let mode = match cfg.eval_windows {
        1 => EvalMode::SingleWindow,
        w => EvalMode::Rolling { windows: w },
    };
    let run_eval = |p: &PolicyParams| evaluate(p, &eval_tasks, mode, cfg.task.horizon, cfg.policy.max_completion);

    let mut records = Vec::with_capacity(cfg.updates + 1);
    let e = run_eval(&params)?;
    let rec = MetricsRecord {
        update_index: 0,
        train: None,
        eval_mse: Some(e.mse),
        eval_mae: Some(e.mae),
        elapsed_seconds: elapsed(),
    };
    sink(&rec)?;
    records.push(rec);

    for u in 1..=cfg.updates {
        let tasks: Vec<ForecastTask> = (0..cfg.tasks_per_batch).map(|s| cfg.train_task(u, s)).collect();
        let old = params.snapshot();
        let rollouts = rollout(
            &old,
            &reference,
            &tasks,
            cfg.completions_per_task(),
            cfg,
            derive_seed(&[cfg.seed, STREAM_ROLLOUT, u as u64]),
        )?;
        let (next, stats) = rl_step(
            &rollouts,
            cfg,
            &params,
            cfg.learning_rate,
            derive_seed(&[cfg.seed, STREAM_SELECT, u as u64]),
        )?;
        params = next;
        let (eval_mse, eval_mae) = if u % cfg.eval_every == 0 || u == cfg.updates {
            let e = run_eval(&params)?;
            (Some(e.mse), Some(e.mae))
        } else {
            (None, None)
        };
        let rec = MetricsRecord {
            update_index: u,
            train: Some(stats),
            eval_mse,
            eval_mae,
            elapsed_seconds: elapsed(),
        };
        sink(&rec)?;
        records.push(rec);
    }
    Ok(TrainOutcome { params, records })
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub outcome: TrainOutcome,
}

/// Output directory of a run: `{out}/{config_hash}/{seed}`.
pub fn run_dir(cfg: &Layered<TrainConfig>, out: &Path) -> PathBuf {
    out.join(cfg.hash(&["seed"])).join(cfg.value.seed.to_string())
}

/// Trains and writes `metrics.csv` (row by row), `config_resolved` and, on
/// success, `checkpoint.bin`.
pub fn run_experiment(cfg: &Layered<TrainConfig>, out: &Path) -> Result<RunOutcome, TrainError> {
    cfg.value.validate()?;
    let dir = run_dir(cfg, out);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config_resolved"), cfg.resolved_text())?;
    let mut metrics = BufWriter::new(File::create(dir.join("metrics.csv"))?);
    writeln!(metrics, "{METRICS_CSV_HEADER}")?;
    metrics.flush()?;
    let outcome = train(&cfg.value, &mut |r| {
        writeln!(metrics, "{}", r.csv_row())?;
        metrics.flush()
    })?;
    let ck = Checkpoint {
        params: outcome.params.clone(),
        rng_seed: cfg.value.seed,
    };
    ck.save(BufWriter::new(File::create(dir.join("checkpoint.bin"))?))?;
    Ok(RunOutcome { dir, outcome })
}

/// One run per value of `key` (a full or suffix config key).
pub fn sweep<S: AsRef<str>>(
    base: &Layered<TrainConfig>,
    key: &str,
    values: &[S],
    out: &Path,
) -> Result<Vec<RunOutcome>, TrainError> {
    let key = base.resolve_key(key)?;
    values
        .iter()
        .map(|v| {
            let cfg = base.clone().with_overrides(&[format!("{key}={}", v.as_ref())])?;
            run_experiment(&cfg, out)
        })
        .collect()
}

/// Runs `f` on a dedicated pool of `workers` threads (0 = rayon default).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, TrainError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| TrainError::Config(format!("worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Dequantization error bound of a task's scale: half the widest bin.
pub fn half_bin(scale: &BinScale, vocab: &Vocab) -> f64 {
    (0..vocab.n_bins() as u16)
        .map(|b| scale.bin_width(vocab, b))
        .fold(0.0, f64::max)
        / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::encode_completion;
    use crate::grip::{SamplingStrategy, ScoreKind};

    fn small() -> TrainConfig {
        let mut c = TrainConfig {
            updates: 3,
            tasks_per_batch: 2,
            eval_every: 2,
            eval_tasks: 4,
            learning_rate: 5.0,
            ..Default::default()
        };
        c.grip.k = 2;
        c.grip.group_size = 4;
        c
    }

    fn pools(cfg: &TrainConfig, params: &PolicyParams, n: usize) -> Vec<Rollout> {
        let tasks: Vec<ForecastTask> = (0..cfg.tasks_per_batch).map(|s| cfg.train_task(1, s)).collect();
        let snap = params.snapshot();
        rollout(&snap, &snap, &tasks, n, cfg, 99).unwrap()
    }

    #[test]
    fn rollout_sizes_and_determinism() {
        let cfg = TrainConfig {
            tasks_per_batch: 1,
            ..Default::default()
        };
        assert_eq!(cfg.completions_per_task(), 48);
        let p = cfg.initial_policy();
        let a = pools(&cfg, &p, cfg.completions_per_task());
        assert_eq!(a[0].pool.len(), 48);
        let b = pools(&cfg, &p, 48);
        assert_eq!(a[0].pool, b[0].pool);
        let grpo = TrainConfig {
            algorithm: Algorithm::Grpo,
            ..cfg
        };
        assert_eq!(grpo.completions_per_task(), 16);
    }

    #[test]
    fn rollout_is_on_policy() {
        let cfg = small();
        let p = cfg.initial_policy();
        for r in pools(&cfg, &p, 6) {
            for t in &r.pool {
                assert_eq!(t.logp_old, t.logp_current);
                let (tokens, logps) = p
                    .sample_completion(&t.prompt, 1.0, cfg.policy.max_completion, 0)
                    .unwrap();
                assert_eq!(p.logprobs(&t.prompt, &tokens), logps);
            }
        }
    }

    #[test]
    fn grip_reduction_matches_grpo_step() {
        let mut cfg = small();
        cfg.grip.k = 1;
        cfg.grip.strategy = SamplingStrategy::LocalRandom;
        cfg.grip.score = ScoreKind::Constant;
        let p = cfg.initial_policy();
        let ro = pools(&cfg, &p, cfg.grip.group_size);
        let (a, sa) = rl_step(&ro, &cfg, &p, 1.0, 5).unwrap();
        let grpo = TrainConfig {
            algorithm: Algorithm::Grpo,
            ..cfg.clone()
        };
        let (b, sb) = rl_step(&ro, &grpo, &p, 1.0, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert_ne!(a, p);
    }

    #[test]
    fn zero_learning_rate_keeps_params_and_reports() {
        let cfg = small();
        let p = cfg.initial_policy();
        let ro = pools(&cfg, &p, cfg.grip.pool_size());
        let (q, stats) = rl_step(&ro, &cfg, &p, 0.0, 1).unwrap();
        assert_eq!(q, p);
        assert!(stats.mean_reward.is_finite());
        assert_eq!(stats.kl_mean, 0.0);
    }

    #[test]
    fn mean_reward_matches_independent_rescoring() {
        let cfg = small();
        let p = cfg.initial_policy();
        let ro = pools(&cfg, &p, cfg.grip.pool_size());
        let (_, stats) = rl_step(&ro, &cfg, &p, 1.0, 1).unwrap();
        let mut all = Vec::new();
        for r in &ro {
            let scale = BinScale::from_history(r.task.history.values());
            for t in &r.pool {
                let parsed = decode_completion(&t.tokens, &r.task, &scale, p.vocab());
                all.push(score_parsed(&parsed, r.task.ground_truth(), &cfg.reward).total);
            }
        }
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        assert!((stats.mean_reward - mean).abs() < 1e-12);
    }

    fn truth_decoder(vocab: &Vocab) -> impl Fn(&EvalWindow) -> Vec<Token> + Sync + '_ {
        move |w: &EvalWindow| encode_completion(&[], w.task.ground_truth(), &w.prompt.scale, vocab)
    }

    #[test]
    fn truth_bins_leave_only_quantization_error() {
        let cfg = small();
        let tasks = cfg.eval_task_set();
        let vocab = Vocab::uniform(32);
        let s = evaluate_with(truth_decoder(&vocab), &vocab, &tasks, EvalMode::SingleWindow, 8).unwrap();
        assert_eq!(s.format_failures, 0);
        for (r, t) in s.records.iter().zip(&tasks) {
            let hb = half_bin(&BinScale::from_history(t.history.values()), &vocab);
            assert!(r.mse.unwrap() <= hb * hb + 1e-12);
            assert!(r.mse.unwrap() > 0.0);
        }
    }

    #[test]
    fn rolling_emits_one_record_per_window() {
        let cfg = TrainConfig {
            eval_windows: 3,
            ..small()
        };
        let tasks = cfg.eval_task_set();
        assert_eq!(tasks[0].horizon(), 24);
        let vocab = Vocab::uniform(32);
        let s = evaluate_with(
            truth_decoder(&vocab),
            &vocab,
            &tasks,
            EvalMode::Rolling { windows: 2 },
            8,
        )
        .unwrap();
        assert_eq!(s.records.len(), 2 * tasks.len());
        assert_eq!(s.records[1].window, 1);
        // too short a target is an error, not a silent truncation
        assert!(evaluate_with(
            truth_decoder(&vocab),
            &vocab,
            &tasks,
            EvalMode::Rolling { windows: 4 },
            8
        )
        .is_err());
    }

    #[test]
    fn evaluation_counts_format_failures_and_is_pure() {
        let cfg = small();
        let p = PolicyParams::zeros(cfg.shape());
        let before = p.clone();
        let tasks = cfg.eval_task_set();
        let none = |_: &EvalWindow| vec![Token::End];
        let s = evaluate_with(none, p.vocab(), &tasks, EvalMode::SingleWindow, 8).unwrap();
        assert_eq!(s.format_failures, tasks.len());
        assert!(s.mse.is_nan());
        let a = evaluate(&p, &tasks, EvalMode::SingleWindow, 8, 24).unwrap();
        let b = evaluate(&p, &tasks, EvalMode::SingleWindow, 8, 24).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.mse.to_bits(), b.mse.to_bits());
        assert_eq!(p, before);
    }

    #[test]
    fn zero_updates_write_only_the_initial_row() {
        let cfg = TrainConfig { updates: 0, ..small() };
        let out = train(&cfg, &mut |_| Ok(())).unwrap();
        assert_eq!(out.records.len(), 1);
        assert!(out.records[0].train.is_none());
        assert!(out.records[0].eval_mse.is_some());
        assert_eq!(out.params, cfg.initial_policy());
    }

    #[test]
    fn eval_rows_follow_the_schedule() {
        let out = train(&small(), &mut |_| Ok(())).unwrap();
        let evals: Vec<usize> = out
            .records
            .iter()
            .filter(|r| r.eval_mse.is_some())
            .map(|r| r.update_index)
            .collect();
        assert_eq!(evals, vec![0, 2, 3]);
        let idx: Vec<usize> = out.records.iter().map(|r| r.update_index).collect();
        assert_eq!(idx, vec![0, 1, 2, 3]);
    }

    #[test]
    fn grip_reduction_matches_grpo_run() {
        let mut cfg = small();
        cfg.grip.k = 1;
        cfg.grip.strategy = SamplingStrategy::LocalRandom;
        cfg.grip.score = ScoreKind::Constant;
        let a = train(&cfg, &mut |_| Ok(())).unwrap();
        cfg.algorithm = Algorithm::Grpo;
        let b = train(&cfg, &mut |_| Ok(())).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let cfg = small();
        let one = with_workers(1, || train(&cfg, &mut |_| Ok(())).unwrap()).unwrap();
        let four = with_workers(4, || train(&cfg, &mut |_| Ok(())).unwrap()).unwrap();
        assert_eq!(one.records, four.records);
        assert_eq!(one.params, four.params);
    }

    #[test]
    fn sink_failure_aborts_after_earlier_rows() {
        let mut seen = Vec::new();
        let r = train(&small(), &mut |rec| {
            if rec.update_index == 2 {
                return Err(io::Error::other("disk full"));
            }
            seen.push(rec.update_index);
            Ok(())
        });
        assert!(matches!(r, Err(TrainError::Io(_))));
        assert_eq!(seen, vec![0, 1]);
    }

    #[test]
    fn run_experiment_layout_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = Layered::<TrainConfig>::from_toml(
            "updates = 2\ntasks_per_batch = 2\neval_tasks = 3\ngrip.k = 2\ngrip.group_size = 4\nseed = 7\n",
        )
        .unwrap();
        let a = run_experiment(&cfg, dir.path()).unwrap();
        assert!(a.dir.ends_with(format!("{}/7", cfg.hash(&["seed"]))));
        let metrics = fs::read_to_string(a.dir.join("metrics.csv")).unwrap();
        let lines: Vec<&str> = metrics.lines().collect();
        assert_eq!(lines[0], METRICS_CSV_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0,,,,,,,,,"));
        assert!(lines.iter().all(|l| l.split(',').count() == 12));
        let resolved = fs::read_to_string(a.dir.join("config_resolved")).unwrap();
        assert!(resolved.contains("grip.group_size = 4\n"));
        let ck = Checkpoint::load(File::open(a.dir.join("checkpoint.bin")).unwrap()).unwrap();
        assert_eq!(ck.params, a.outcome.params);
        assert_eq!(ck.rng_seed, 7);

        let other = tempfile::tempdir().unwrap();
        let b = run_experiment(&cfg, other.path()).unwrap();
        assert_eq!(fs::read(b.dir.join("metrics.csv")).unwrap(), metrics.as_bytes());
        assert_eq!(
            fs::read(b.dir.join("checkpoint.bin")).unwrap(),
            fs::read(a.dir.join("checkpoint.bin")).unwrap()
        );
    }

    #[test]
    fn sweep_writes_one_run_per_value() {
        let dir = tempfile::tempdir().unwrap();
        let base = Layered::<TrainConfig>::from_toml("updates = 1\ntasks_per_batch = 1\neval_tasks = 2\ngrip.k = 1\n")
            .unwrap();
        let runs = sweep(&base, "group_size", &["4", "8", "16"], dir.path()).unwrap();
        assert_eq!(runs.len(), 3);
        for (r, g) in runs.iter().zip([4, 8, 16]) {
            let resolved = fs::read_to_string(r.dir.join("config_resolved")).unwrap();
            assert!(resolved.contains(&format!("grip.group_size = {g}\n")));
            assert!(r.dir.join("metrics.csv").exists());
        }
        assert!(matches!(
            sweep(&base, "nope", &["1"], dir.path()),
            Err(TrainError::Layered(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            learning_rate: 0.0,
            ..small()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            tasks_per_batch: 0,
            ..small()
        }
        .validate()
        .is_err());
        let mut c = small();
        c.grip.group_size = 1;
        assert!(matches!(c.validate(), Err(TrainError::Grip(_))));
        let mut c = small();
        c.reward.decomposition_window = 4;
        assert!(matches!(c.validate(), Err(TrainError::Config(_))));
    }

    #[test]
    fn sft_warmup_improves_greedy_error() {
        let mut cfg = small();
        cfg.sft.samples = 40;
        cfg.sft.learning_rate = 0.2;
        let p0 = cfg.initial_policy();
        let p1 = sft_warmup(&p0, &cfg).unwrap();
        let tasks = cfg.eval_task_set();
        let e0 = evaluate(&p0, &tasks, EvalMode::SingleWindow, 8, 24).unwrap();
        let e1 = evaluate(&p1, &tasks, EvalMode::SingleWindow, 8, 24).unwrap();
        assert!(e1.mse < e0.mse, "{} !< {}", e1.mse, e0.mse);
    }
}
