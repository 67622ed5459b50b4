//! The token policy: encode a task, sample and greedily decode completions,
//! read them back as text, and round-trip a checkpoint.

use rftcast::codec::{decode_completion, encode_prompt, THINK_LEN};
use rftcast::data::{sine_task, SineTaskConfig};
use rftcast::policy::{Checkpoint, PolicyParams, PolicyShape, Vocab};

fn main() {
    let task = sine_task(&SineTaskConfig::default(), 0, 1);
    let shape = PolicyShape::new(Vocab::uniform(32), 2, 16).with_value_lags(vec![8]);
    let params = PolicyParams::format_prior(shape, THINK_LEN, task.horizon(), 6.0);
    let prompt = encode_prompt(&task, params.vocab());

    let (tokens, logps) = params.sample_completion(&prompt.tokens, 1.0, 24, 3).unwrap();
    let text: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
    println!("sampled {} tokens: {}", tokens.len(), text.join(" "));
    println!("sequence log-prob {:.3}", logps.iter().sum::<f64>());

    let greedy = params.greedy_completion(&prompt.tokens, 24);
    let parsed = decode_completion(&greedy, &task, &prompt.scale, params.vocab());
    println!("greedy forecast {:?} (valid: {})", parsed.values(), parsed.is_valid());

    let ck = Checkpoint { params, rng_seed: 1 };
    let bytes = ck.to_bytes();
    println!(
        "checkpoint {} bytes, round trip ok: {}",
        bytes.len(),
        Checkpoint::from_bytes(&bytes).unwrap() == ck
    );
}
