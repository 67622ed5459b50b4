use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rftcast::config::Layered;
use rftcast::trainer::TrainConfig;
use tempfile::TempDir;

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");
const CONFIGS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/configs");

const SMALL: &str = "updates = 2\ntasks_per_batch = 2\neval_every = 1\neval_tasks = 3\n\
                     learning_rate = 5.0\n[grip]\nk = 2\ngroup_size = 4\n";

fn rftcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rftcast"))
        .args(args)
        .env_remove("TIME_R1_API_KEY")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn fixture(name: &str) -> String {
    format!("{FIXTURES}/{name}")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn reward_scores_the_fixture() {
    let o = rftcast(&[
        "reward",
        "--input",
        &fixture("hufl_completion.txt"),
        "--task",
        &fixture("hufl_task.json"),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(
        lines[0],
        "index,format,length,accuracy,seasonal,trend,changepoint,total"
    );
    assert_eq!(lines.len(), 2);
    let cells: Vec<&str> = lines[1].split(',').collect();
    assert_eq!((cells[0], cells[1]), ("0", "0"));
}

#[test]
fn reward_reads_jsonl_and_writes_out() {
    let d = TempDir::new().unwrap();
    let good = fs::read_to_string(fixture("hufl_completion.txt")).unwrap();
    let lines = [
        serde_json::json!({ "completion": good }).to_string(),
        serde_json::json!({ "completion": "no tags" }).to_string(),
    ];
    let input = write(&d, "c.jsonl", &(lines.join("\n") + "\n"));
    let out = d.path().join("scores.csv");
    let o = rftcast(&[
        "reward",
        "--input",
        s(&input),
        "--task",
        &fixture("hufl_task.json"),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(out).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].ends_with(",2.5"));
    assert!(rows[2].starts_with("1,-1,"));
}

#[test]
fn reward_empty_input_is_header_only() {
    let d = TempDir::new().unwrap();
    let input = write(&d, "empty.txt", "");
    let o = rftcast(&["reward", "--input", s(&input), "--task", &fixture("hufl_task.json")]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().count(), 1);
}

#[test]
fn reward_rejects_unknown_key_and_missing_files() {
    let d = TempDir::new().unwrap();
    let cfg = write(&d, "bad.toml", "reward.sigmoid_slop = 0.3\n");
    let o = rftcast(&[
        "reward",
        "--input",
        &fixture("hufl_completion.txt"),
        "--task",
        &fixture("hufl_task.json"),
        "--config",
        s(&cfg),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("reward.sigmoid_slop"));

    let o = rftcast(&[
        "reward",
        "--input",
        "/nonexistent/x.txt",
        "--task",
        &fixture("hufl_task.json"),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/x.txt"));
}

#[test]
fn sft_build_synthetic_is_sized_and_repeatable() {
    let d = TempDir::new().unwrap();
    let a = d.path().join("a.jsonl");
    let b = d.path().join("b.jsonl");
    for p in [&a, &b] {
        let o = rftcast(&[
            "--seed",
            "4",
            "sft-build",
            "--provider",
            "synthetic",
            "--tasks",
            "300",
            "--out",
            s(p),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(stderr(&o).contains("300 written, 0 skipped"));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 300);
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for field in ["task_id", "prompt", "completion"] {
        assert!(first[field].is_string());
    }

    let o = rftcast(&[
        "--seed",
        "5",
        "sft-build",
        "--provider",
        "synthetic",
        "--tasks",
        "300",
        "--out",
        s(&b),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_ne!(text, fs::read_to_string(&b).unwrap());
}

#[test]
fn sft_build_from_csv_windows() {
    let d = TempDir::new().unwrap();
    let mut csv = String::from("date,HUFL\n");
    for h in 0..40 {
        csv.push_str(&format!(
            "2016-07-{:02} {:02}:00:00,{:.3}\n",
            1 + h / 24,
            h % 24,
            5.0 + (h as f64 / 3.0).sin()
        ));
    }
    let src = write(&d, "etth1.csv", &csv);
    let out = d.path().join("sft.jsonl");
    let o = rftcast(&[
        "sft-build",
        "--provider",
        "synthetic",
        "--csv",
        s(&src),
        "--channel",
        "HUFL",
        "--stride",
        "4",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    // 40 rows, windows of 16 + 8 every 4 rows
    assert_eq!(fs::read_to_string(out).unwrap().lines().count(), 5);
}

#[test]
fn remote_without_key_exits_before_network() {
    let d = TempDir::new().unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let out = d.path().join("remote.jsonl");
    let o = rftcast(&[
        "sft-build",
        "--provider",
        "remote",
        "--base-url",
        &url,
        "--model",
        "m",
        "--tasks",
        "2",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("TIME_R1_API_KEY"));
    assert!(listener.accept().is_err(), "no connection may be attempted");
    assert!(!out.exists());
}

fn train_dir(out: &Path) -> Vec<PathBuf> {
    let mut dirs = Vec::new();
    for h in fs::read_dir(out).unwrap() {
        for seed in fs::read_dir(h.unwrap().path()).unwrap() {
            dirs.push(seed.unwrap().path());
        }
    }
    dirs.sort();
    dirs
}

#[test]
fn train_writes_layout_and_is_deterministic() {
    let d = TempDir::new().unwrap();
    let cfg = write(&d, "c.toml", SMALL);
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    for out in [&a, &b] {
        let o = rftcast(&["--seed", "7", "train", "--config", s(&cfg), "--out", s(out)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let da = train_dir(&a);
    assert_eq!(da.len(), 1);
    assert!(da[0].ends_with("7"));
    for f in ["metrics.csv", "checkpoint.bin", "config_resolved"] {
        assert_eq!(
            fs::read(da[0].join(f)).unwrap(),
            fs::read(train_dir(&b)[0].join(f)).unwrap(),
            "{f}"
        );
    }
    let metrics = fs::read_to_string(da[0].join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 3);
    assert!(fs::read_to_string(da[0].join("config_resolved"))
        .unwrap()
        .contains("seed = 7\n"));
}

#[test]
fn train_workers_do_not_change_outputs() {
    let d = TempDir::new().unwrap();
    let cfg = write(&d, "c.toml", SMALL);
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    for (out, w) in [(&a, "1"), (&b, "4")] {
        let o = rftcast(&["--workers", w, "train", "--config", s(&cfg), "--out", s(out)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let read = |p: &Path| fs::read(train_dir(p)[0].join("metrics.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn train_grip_and_grpo_rows_line_up() {
    let d = TempDir::new().unwrap();
    let cfg = write(&d, "c.toml", SMALL);
    let out = d.path().join("runs");
    for alg in ["grip", "grpo"] {
        let o = rftcast(&["train", "--config", s(&cfg), "--algorithm", alg, "--out", s(&out)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let dirs = train_dir(&out);
    assert_eq!(dirs.len(), 2);
    let idx = |p: &PathBuf| -> Vec<String> {
        fs::read_to_string(p.join("metrics.csv"))
            .unwrap()
            .lines()
            .map(|l| l.split(',').next().unwrap().to_string())
            .collect()
    };
    assert_eq!(idx(&dirs[0]), idx(&dirs[1]));
    let algs: Vec<bool> = dirs
        .iter()
        .map(|p| {
            fs::read_to_string(p.join("config_resolved"))
                .unwrap()
                .contains("algorithm = \"grpo\"")
        })
        .collect();
    assert_eq!(algs.iter().filter(|x| **x).count(), 1);
}

#[test]
fn train_sweep_runs_each_value() {
    let d = TempDir::new().unwrap();
    let cfg = write(&d, "c.toml", SMALL);
    let out = d.path().join("runs");
    let o = rftcast(&[
        "train",
        "--config",
        s(&cfg),
        "--sweep",
        "k=1,2,3",
        "--set",
        "updates=1",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let dirs = train_dir(&out);
    assert_eq!(dirs.len(), 3);
    let mut ks: Vec<String> = dirs
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p.join("config_resolved")).unwrap();
            text.lines().find(|l| l.starts_with("grip.k =")).unwrap().to_string()
        })
        .collect();
    ks.sort();
    assert_eq!(ks, ["grip.k = 1", "grip.k = 2", "grip.k = 3"]);
    assert_eq!(stdout(&o).lines().count(), 3);
}

#[test]
fn train_usage_errors_exit_2() {
    let d = TempDir::new().unwrap();
    let o = rftcast(&["train", "--config", "/nonexistent/c.toml", "--out", s(d.path())]);
    assert_eq!(o.status.code(), Some(2));
    let o = rftcast(&["train", "--out", s(d.path())]);
    assert_eq!(o.status.code(), Some(2));
    let cfg = write(&d, "c.toml", SMALL);
    let o = rftcast(&[
        "train",
        "--config",
        s(&cfg),
        "--set",
        "learning_rate=-1",
        "--out",
        s(d.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = rftcast(&[
        "train",
        "--config",
        s(&cfg),
        "--sweep",
        "nope=1,2",
        "--out",
        s(d.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope"));
}

fn trained_checkpoint(d: &TempDir) -> (PathBuf, PathBuf) {
    let cfg = write(d, "c.toml", SMALL);
    let out = d.path().join("runs");
    let o = rftcast(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    (train_dir(&out)[0].join("checkpoint.bin"), cfg)
}

#[test]
fn eval_is_repeatable_and_rolls() {
    let d = TempDir::new().unwrap();
    let (ck, cfg) = trained_checkpoint(&d);
    let run = |extra: &[&str]| {
        let mut args = vec!["eval", "--checkpoint", s(&ck), "--config", s(&cfg), "--tasks", "5"];
        args.extend_from_slice(extra);
        let o = rftcast(&args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        stdout(&o)
    };
    let single = run(&[]);
    assert_eq!(single, run(&[]));
    assert_eq!(single.lines().count(), 1 + 5 + 1);
    assert!(single.lines().last().unwrap().starts_with("aggregate,,"));

    let rolling = run(&["--mode", "rolling", "--windows", "2"]);
    let rows: Vec<&str> = rolling
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with("aggregate"))
        .collect();
    assert_eq!(rows.len(), 10);
    let first_task = rows[0].split(',').next().unwrap();
    assert_eq!(
        rows.iter().filter(|r| r.starts_with(&format!("{first_task},"))).count(),
        2
    );
}

#[test]
fn eval_rejects_bad_checkpoints_without_output() {
    let d = TempDir::new().unwrap();
    let (ck, _) = trained_checkpoint(&d);
    let mut bytes = fs::read(&ck).unwrap();
    let out = d.path().join("eval.csv");

    let mut corrupt = bytes.clone();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 0xff;
    let bad = write(&d, "corrupt.bin", "");
    fs::write(&bad, &corrupt).unwrap();
    let o = rftcast(&["eval", "--checkpoint", s(&bad), "--tasks", "2", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());

    bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
    fs::write(&bad, &bytes).unwrap();
    let o = rftcast(&["eval", "--checkpoint", s(&bad), "--tasks", "2", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("version 99") && msg.contains("version 2"), "{msg}");
    assert!(!out.exists());
}

#[test]
fn shipped_configs_parse() {
    let default = fs::read_to_string(format!("{CONFIGS}/default.toml")).unwrap();
    assert_eq!(
        Layered::<TrainConfig>::from_toml(&default).unwrap(),
        Layered::defaults()
    );
    let desk = Layered::<TrainConfig>::from_toml(&fs::read_to_string(format!("{CONFIGS}/desk.toml")).unwrap()).unwrap();
    desk.value.validate().unwrap();
    assert_eq!(desk.value.grip.weight_temperature, 0.02);
}
