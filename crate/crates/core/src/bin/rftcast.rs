use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use rftcast::config::{split_override, Layered};
use rftcast::data::{read_dataset, sine_tasks, window_tasks};
use rftcast::policy::Checkpoint;
use rftcast::reward::{total_reward, BREAKDOWN_CSV_HEADER};
use rftcast::seed::derive_seed;
use rftcast::sft::{build_sft_dataset, CompletionProvider, RemoteProvider, SyntheticTeacher};
use rftcast::textio::ForecastTask;
use rftcast::trainer::{evaluate, run_experiment, sweep, with_workers, Algorithm, EvalMode, TrainConfig};

/// Exit status 2: the invocation or its inputs are wrong.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl fmt::Display) -> anyhow::Error {
    Usage(msg.to_string()).into()
}

#[derive(Parser)]
#[command(
    name = "rftcast",
    version,
    about = "Reinforcement fine-tuning for forecasting as text generation"
)]
struct Cli {
    /// Seed for every random draw; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Score completions against one task.
    Reward(RewardArgs),
    /// Build a supervised warm-up dataset.
    SftBuild(SftBuildArgs),
    /// Train, optionally sweeping one key.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
}

#[derive(Args)]
struct RewardArgs {
    /// Plain text (one completion) or `.jsonl` with a `completion` field per line.
    #[arg(long)]
    input: PathBuf,
    /// Task JSON with history and target.
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Where tasks come from: `--tasks N` synthetic, or windows of a CSV file.
#[derive(Args)]
struct TaskSource {
    /// Number of synthetic sine tasks.
    #[arg(long, conflicts_with = "csv")]
    tasks: Option<usize>,
    /// CSV with header `date,<channel>...`.
    #[arg(long, requires = "channel")]
    csv: Option<PathBuf>,
    #[arg(long)]
    channel: Option<String>,
    #[arg(long, default_value = "hourly")]
    frequency: String,
    /// Rows between window starts.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Keep at most this many CSV windows.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Provider {
    Synthetic,
    Remote,
}

#[derive(Args)]
struct SftBuildArgs {
    #[arg(long, value_enum)]
    provider: Provider,
    #[command(flatten)]
    source: TaskSource,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Candidates per task; defaults to `sft.n_candidates`.
    #[arg(long)]
    candidates: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Chat-completions endpoint root (remote provider).
    #[arg(long, required_if_eq("provider", "remote"))]
    base_url: Option<String>,
    #[arg(long, required_if_eq("provider", "remote"))]
    model: Option<String>,
    #[arg(long, default_value_t = 0.6)]
    temperature: f64,
    #[arg(long, default_value_t = 120)]
    timeout_secs: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    algorithm: Option<AlgorithmArg>,
    /// `key=value`, repeatable.
    #[arg(long = "set")]
    set: Vec<String>,
    /// `key=v1,v2,...`: one run per value.
    #[arg(long)]
    sweep: Option<String>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgorithmArg {
    Grip,
    Grpo,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Single,
    Rolling,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    source: TaskSource,
    #[arg(long, value_enum, default_value = "single")]
    mode: ModeArg,
    /// Horizons per task in rolling mode.
    #[arg(long, default_value_t = 2)]
    windows: usize,
    /// Defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<Layered<TrainConfig>> {
    let base: Layered<TrainConfig> = match path {
        Some(p) => Layered::from_toml(&read(p)?).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        None => Layered::defaults(),
    };
    let overrides: Vec<String> = seed.iter().map(|s| format!("seed={s}")).collect();
    let cfg = base.with_overrides(&overrides).map_err(usage)?;
    cfg.value.validate().map_err(usage)?;
    Ok(cfg)
}

/// Writes `text` to `out` or stdout. Files are only created once the text is
/// complete.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

#[derive(Deserialize)]
struct CompletionLine {
    completion: String,
}

fn cmd_reward(a: &RewardArgs, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), seed)?;
    let task: ForecastTask = serde_json::from_str(&read(&a.task)?)
        .map_err(|e| usage(format!("{}: not a task file: {e}", a.task.display())))?;
    task.validate().map_err(usage)?;
    let text = read(&a.input)?;
    let completions: Vec<String> = if a.input.extension().is_some_and(|e| e == "jsonl") {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str::<CompletionLine>(l)
                    .map(|c| c.completion)
                    .map_err(|e| usage(format!("{} line {}: {e}", a.input.display(), i + 1)))
            })
            .collect::<Result<_>>()?
    } else if text.trim().is_empty() {
        Vec::new()
    } else {
        vec![text]
    };
    let mut out = format!("index,{BREAKDOWN_CSV_HEADER}\n");
    for (i, c) in completions.iter().enumerate() {
        out.push_str(&format!(
            "{i},{}\n",
            total_reward(c, &task, &cfg.value.reward).csv_row()
        ));
    }
    emit(a.out.as_deref(), &out)
}

fn source_tasks(
    src: &TaskSource,
    cfg: &TrainConfig,
    horizon: usize,
    default_n: usize,
    stream: u64,
) -> Result<Vec<ForecastTask>> {
    match &src.csv {
        Some(path) => {
            let file = File::open(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
            let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
            let ds = read_dataset(file, name, &src.frequency).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            if ds.gaps > 0 {
                eprintln!(
                    "warning: {} has {} irregular intervals; windows across them are skipped",
                    path.display(),
                    ds.gaps
                );
            }
            let channel = src.channel.as_deref().expect("clap requires --channel with --csv");
            let mut tasks = window_tasks(&ds, channel, cfg.task.history, horizon, src.stride).map_err(usage)?;
            if let Some(n) = src.limit {
                tasks.truncate(n);
            }
            Ok(tasks)
        }
        None => {
            let task_cfg = rftcast::data::SineTaskConfig {
                horizon,
                ..cfg.task.clone()
            };
            Ok(sine_tasks(
                &task_cfg,
                src.tasks.unwrap_or(default_n),
                derive_seed(&[cfg.seed, stream]),
            ))
        }
    }
}

fn cmd_sft_build(a: &SftBuildArgs, seed: Option<u64>) -> Result<()> {
    // the credential check comes first so nothing is read or sent without it
    let remote = match a.provider {
        Provider::Remote => Some(
            RemoteProvider::from_env(
                a.base_url.as_deref().unwrap_or_default(),
                a.model.as_deref().unwrap_or_default(),
                a.temperature,
                Duration::from_secs(a.timeout_secs),
            )
            .map_err(usage)?,
        ),
        Provider::Synthetic => None,
    };
    let cfg = load_config(a.config.as_deref(), seed)?;
    let c = &cfg.value;
    let tasks = source_tasks(&a.source, c, c.task.horizon, c.sft.samples, 5)?;
    let teacher = SyntheticTeacher {
        noise_scale: c.sft.teacher_noise,
        ..Default::default()
    };
    let provider: &dyn CompletionProvider = match &remote {
        Some(r) => r,
        None => &teacher,
    };
    let file = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let n = a.candidates.unwrap_or(c.sft.n_candidates);
    let (_, report) = build_sft_dataset(&tasks, provider, n, c.seed, BufWriter::new(file)).map_err(usage)?;
    for (id, reason) in &report.skipped {
        eprintln!("skipped {id}: {reason}");
    }
    eprintln!(
        "sft-build: {} tasks, {} written, {} skipped -> {}",
        tasks.len(),
        report.written,
        report.skipped.len(),
        a.out.display()
    );
    if report.written == 0 {
        anyhow::bail!("no samples written");
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(Some(&a.config), seed)?;
    let mut overrides = a.set.clone();
    if let Some(alg) = a.algorithm {
        let alg = match alg {
            AlgorithmArg::Grip => Algorithm::Grip,
            AlgorithmArg::Grpo => Algorithm::Grpo,
        };
        overrides.push(format!("algorithm=\"{alg}\""));
    }
    cfg = cfg.with_overrides(&overrides).map_err(usage)?;
    cfg.value.validate().map_err(usage)?;
    let runs = match &a.sweep {
        Some(spec) => {
            let (key, values) = split_override(spec).map_err(usage)?;
            let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
            if values.is_empty() {
                return Err(usage(format!("--sweep {spec}: no values")));
            }
            // fail on bad keys or values before any run starts
            let key = cfg.resolve_key(key).map_err(usage)?;
            for v in &values {
                let c = cfg.clone().with_overrides(&[format!("{key}={v}")]).map_err(usage)?;
                c.value.validate().map_err(usage)?;
            }
            sweep(&cfg, &key, &values, &a.out)?
        }
        None => vec![run_experiment(&cfg, &a.out)?],
    };
    for r in runs {
        let last = r.outcome.records.last().expect("initial row");
        println!("{}\teval_mse={}", r.dir.display(), last.eval_mse.unwrap_or(f64::NAN));
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs, seed: Option<u64>) -> Result<()> {
    let bytes = fs::read(&a.checkpoint).map_err(|e| usage(format!("cannot read {}: {e}", a.checkpoint.display())))?;
    let ck = Checkpoint::from_bytes(&bytes).map_err(|e| usage(format!("{}: {e}", a.checkpoint.display())))?;
    let cfg = load_config(a.config.as_deref(), seed)?;
    let c = &cfg.value;
    let mode = match a.mode {
        ModeArg::Single => EvalMode::SingleWindow,
        ModeArg::Rolling if a.windows >= 1 => EvalMode::Rolling { windows: a.windows },
        ModeArg::Rolling => return Err(usage("--windows must be >= 1")),
    };
    let h = c.task.horizon;
    let tasks = source_tasks(&a.source, c, h * mode.windows(), c.eval_tasks, 2)?;
    if tasks.is_empty() {
        return Err(usage("no evaluation tasks"));
    }
    let summary = evaluate(&ck.params, &tasks, mode, h, c.policy.max_completion)?;
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("task_id,window,mse,mae,format_failures\n");
    for r in &summary.records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.task_id,
            r.window,
            cell(r.mse),
            cell(r.mae),
            u8::from(r.mse.is_none())
        ));
    }
    out.push_str(&format!(
        "aggregate,,{},{},{}\n",
        summary.mse, summary.mae, summary.format_failures
    ));
    emit(a.out.as_deref(), &out)
}

fn run(cli: &Cli) -> Result<()> {
    let seed = cli.seed;
    let job = || match &cli.cmd {
        Cmd::Reward(a) => cmd_reward(a, seed),
        Cmd::SftBuild(a) => cmd_sft_build(a, seed),
        Cmd::Train(a) => cmd_train(a, seed),
        Cmd::Eval(a) => cmd_eval(a, seed),
    };
    with_workers(cli.workers, job)?
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
