//! Group-relative advantages, the k3 KL estimator and the clipped surrogate
//! on hand-picked numbers.

use rftcast::grpo::{clipped_surrogate, group_advantages, kl_k3};

fn main() {
    for group in [vec![1.0, 2.0, 3.0], vec![0.5; 4], vec![-1.0, 2.2, 2.3, 2.4]] {
        println!("{group:?} -> {:?}", group_advantages(&group).unwrap());
    }
    for rho in [0.5_f64, 1.0, 2.0] {
        // k3 takes log-probs: ref/current ratio rho
        println!("kl_k3(rho={rho}) = {:.6}", kl_k3(rho.ln(), 0.0));
    }
    for ratio in [0.7, 1.0, 1.5] {
        println!(
            "ratio {ratio}: surrogate(A=+1) = {:.2}, surrogate(A=-1) = {:.2}",
            clipped_surrogate(ratio, 1.0, 0.2),
            clipped_surrogate(ratio, -1.0, 0.2)
        );
    }
}
