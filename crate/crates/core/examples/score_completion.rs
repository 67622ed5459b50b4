//! Scores the bundled transformer-load completion, then a few damaged
//! variants, and prints the per-term breakdown.

use rftcast::reward::{total_reward, RewardConfig, BREAKDOWN_CSV_HEADER};
use rftcast::textio::ForecastTask;

fn main() {
    let task: ForecastTask = serde_json::from_str(include_str!("../fixtures/hufl_task.json")).unwrap();
    let good = include_str!("../fixtures/hufl_completion.txt");
    let half: String = {
        let keep: Vec<&str> = good.lines().take(5 + 48).collect();
        format!("{}\n```\n</answer>", keep.join("\n"))
    };
    let shifted = good.replace(" 1", " 2");
    let untagged = good.replace("<think>", "");

    let cfg = RewardConfig::default();
    println!("variant,{BREAKDOWN_CSV_HEADER}");
    for (name, text) in [
        ("exact", good),
        ("half", &half),
        ("shifted", &shifted),
        ("untagged", &untagged),
    ] {
        println!("{name},{}", total_reward(text, &task, &cfg).csv_row());
    }
    println!("max total = {}", cfg.max_total());
}
