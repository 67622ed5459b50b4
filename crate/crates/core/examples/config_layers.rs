//! Layered config: a file over the defaults, command-line style overrides,
//! the resolved text and the hash that names the run directory.

use rftcast::config::Layered;
use rftcast::trainer::TrainConfig;

fn main() {
    let file = "algorithm = \"grpo\"\n[grip]\nk = 2\n";
    let cfg = Layered::<TrainConfig>::from_toml(file)
        .unwrap()
        .with_overrides(&["group_size=8", "reward.enabled.accuracy=false", "seed=3"])
        .unwrap();
    print!("{}", cfg.resolved_text());
    println!("hash (seed excluded): {}", cfg.hash(&["seed"]));
    match Layered::<TrainConfig>::from_toml("reward.sigmoid_slop = 1") {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => unreachable!(),
    }
}
