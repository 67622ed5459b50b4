//! Rolling evaluation: each decoded horizon is fed back as history for the
//! next one, and errors are reported per window.

use rftcast::data::{sine_tasks, SineTaskConfig};
use rftcast::trainer::{evaluate, EvalMode, TrainConfig};

fn main() {
    let cfg = TrainConfig::default();
    let params = cfg.initial_policy();
    let three = SineTaskConfig {
        horizon: 3 * cfg.task.horizon,
        ..cfg.task.clone()
    };
    let tasks = sine_tasks(&three, 4, 2);
    for mode in [EvalMode::SingleWindow, EvalMode::Rolling { windows: 3 }] {
        let s = evaluate(&params, &tasks, mode, cfg.task.horizon, cfg.policy.max_completion).unwrap();
        println!(
            "{mode:?}: mse {:.4}, mae {:.4}, failures {}",
            s.mse, s.mae, s.format_failures
        );
        for r in &s.records {
            println!("  {} window {}: mse {:?}", r.task_id, r.window, r.mse);
        }
    }
}
