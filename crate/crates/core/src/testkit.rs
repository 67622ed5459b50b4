//! Random instances and numeric oracles shared by optimizer tests.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::grpo::GroupBatch;
use crate::policy::{Matrix, PolicyParams, PolicyShape, Token, TrajectoryRecord, Vocab};
use crate::reward::RewardBreakdown;

pub fn small_shape() -> PolicyShape {
    PolicyShape::new(Vocab::uniform(4), 2, 4)
}

fn perturbed(p: &PolicyParams, sd: f64, rng: &mut ChaCha8Rng) -> PolicyParams {
    let mut q = p.clone();
    if sd > 0.0 {
        let n = Normal::new(0.0, sd).unwrap();
        q.weights.as_mut_slice().iter_mut().for_each(|w| *w += n.sample(rng));
    }
    q
}

/// `g` trajectories sampled from a random rollout policy, with a reference
/// policy `ref_sd` away and a current policy `cur_sd` away from it.
/// Returns the batch and the current parameters.
pub fn random_batch(rng: &mut ChaCha8Rng, g: usize, cur_sd: f64, ref_sd: f64) -> (GroupBatch, PolicyParams) {
    let shape = small_shape();
    let old = perturbed(&PolicyParams::zeros(shape.clone()), 1.0, rng);
    let reference = perturbed(&old, ref_sd, rng);
    let current = perturbed(&old, cur_sd, rng);
    let vocab_len = shape.vocab.len();
    let prompt: Arc<[Token]> = (0..3)
        .map(|_| shape.vocab.token(rng.random_range(0..vocab_len)))
        .collect();
    let trajs = (0..g)
        .map(|_| {
            let (tokens, _) = old
                .sample_completion(&prompt, 1.0, rng.random_range(1..7), rng.random())
                .unwrap();
            let total = rng.random_range(-1.0..2.5);
            let breakdown = RewardBreakdown {
                total,
                ..Default::default()
            };
            TrajectoryRecord::new("p0", prompt.clone(), tokens, &old, &reference, breakdown)
        })
        .collect();
    let batch = GroupBatch::new(trajs, 0.2, 0.04).unwrap();
    (batch, current)
}

/// True if some token ratio lies within `tol` of a clip edge, where the
/// surrogate has a kink.
pub fn near_clip_boundary(batch: &GroupBatch, params: &PolicyParams, tol: f64) -> bool {
    let eps = batch.epsilon_clip;
    batch.trajectories.iter().any(|tr| {
        let lp = params.logprobs(&tr.prompt, &tr.tokens);
        lp.iter().zip(&tr.logp_old).any(|(c, o)| {
            let r = (c - o).exp();
            (r - (1.0 - eps)).abs() < tol || (r - (1.0 + eps)).abs() < tol
        })
    })
}

/// Central differences of `f` over every weight.
pub fn fd_gradient(params: &PolicyParams, f: impl Fn(&PolicyParams) -> f64) -> Matrix {
    let h = 1e-6;
    let mut p = params.clone();
    let mut out = Matrix::zeros(params.weights.rows(), params.weights.cols());
    for k in 0..params.weights.as_slice().len() {
        let w = p.weights.as_slice()[k];
        p.weights.as_mut_slice()[k] = w + h;
        let up = f(&p);
        p.weights.as_mut_slice()[k] = w - h;
        let down = f(&p);
        p.weights.as_mut_slice()[k] = w;
        out.as_mut_slice()[k] = (up - down) / (2.0 * h);
    }
    out
}

/// `max |a − b| / max(max |a|, max |b|, 1e-8)`.
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    let diff = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    diff / a.max_abs().max(b.max_abs()).max(1e-8)
}
