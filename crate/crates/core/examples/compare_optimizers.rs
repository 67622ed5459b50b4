//! Short GRIP vs GRPO runs on the sine task from one seed, printing the pool
//! reward every ten updates.
//!
//! `cargo run --release --example compare_optimizers -- 80`

use rftcast::grip::SamplingStrategy;
use rftcast::trainer::{train, Algorithm, TrainConfig};

fn main() {
    let updates = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    let mut base = TrainConfig {
        updates,
        learning_rate: 10.0,
        eval_every: 10,
        ..Default::default()
    };
    base.grip.strategy = SamplingStrategy::ClusterRandom;
    base.grip.weight_temperature = 0.02;

    let mut curves = Vec::new();
    for alg in [Algorithm::Grpo, Algorithm::Grip] {
        let cfg = TrainConfig {
            algorithm: alg,
            ..base.clone()
        };
        let out = train(&cfg, &mut |_| Ok(())).unwrap();
        curves.push((alg, out.records));
    }
    println!("update,grpo_reward,grip_reward,grpo_mse,grip_mse");
    for u in (10..=updates).step_by(10) {
        let (a, b) = (&curves[0].1[u], &curves[1].1[u]);
        println!(
            "{u},{:.3},{:.3},{:.4},{:.4}",
            a.train.unwrap().mean_reward,
            b.train.unwrap().mean_reward,
            a.eval_mse.unwrap_or(f64::NAN),
            b.eval_mse.unwrap_or(f64::NAN)
        );
    }
}
