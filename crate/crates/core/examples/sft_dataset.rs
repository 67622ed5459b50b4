//! Builds a small warm-up dataset with the offline teacher and checks that
//! every sample earns the maximum reward against its own task.

use rftcast::data::{sine_tasks, SineTaskConfig};
use rftcast::reward::{total_reward, RewardConfig};
use rftcast::sft::{build_sft_dataset, SyntheticTeacher};

fn main() {
    let tasks = sine_tasks(&SineTaskConfig::default(), 6, 11);
    let mut buf = Vec::new();
    let (samples, report) = build_sft_dataset(&tasks, &SyntheticTeacher::default(), 5, 11, &mut buf).unwrap();
    println!(
        "{} written, {} skipped, {} bytes of jsonl",
        report.written,
        report.skipped.len(),
        buf.len()
    );

    let cfg = RewardConfig::default();
    for (s, t) in samples.iter().zip(&tasks) {
        println!(
            "{}: total {:.3} of {:.3}",
            s.task_id,
            total_reward(&s.completion, t, &cfg).total,
            cfg.max_total()
        );
    }
    println!("\n{}", samples[0].completion);
}
