//! Group-relative policy optimization: advantages, the k3 KL estimator and the
//! clipped surrogate with its analytic gradient.
//!
//! The weighted routines take one weight per trajectory. GRPO passes `1/G`
//! for every trajectory; GRIP passes its softmax weights. Sharing the code
//! path is what makes the reduction between the two exact.

use rayon::prelude::*;
use thiserror::Error;

use crate::policy::{Matrix, PolicyParams, TrajectoryRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrpoError {
    #[error("group of {0} trajectories is too small; advantage normalization needs at least 2")]
    GroupTooSmall(usize),
    #[error("trajectories belong to different prompts ({0} and {1})")]
    MixedPrompts(String, String),
    #[error("trajectory {index}: log-probability lengths do not match {tokens} tokens")]
    RaggedRecord { index: usize, tokens: usize },
    #[error("weights: expected {expected}, got {got}")]
    WeightCount { expected: usize, got: usize },
}

/// Below this population std a group carries no signal.
pub const DEGENERATE_STD: f64 = 1e-8;

/// `(r_i − mean) / std_pop`, or all zeros for a degenerate group.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(std >= DEGENERATE_STD) {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// k3 estimator of KL(π_θ ‖ π_ref) at one token.
pub fn kl_k3(logp_ref: f64, logp_cur: f64) -> f64 {
    let log_ratio = logp_ref - logp_cur;
    log_ratio.exp() - log_ratio - 1.0
}

/// `min(ρA, clip(ρ, 1−ε, 1+ε)A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
    unclipped.min(clipped)
}

/// Whether the min selects the unclipped branch (ties count as unclipped).
pub fn unclipped_selected(ratio: f64, advantage: f64, eps: f64) -> bool {
    let unclipped = ratio * advantage;
    unclipped <= ratio.clamp(1.0 - eps, 1.0 + eps) * advantage
}

#[derive(Debug, Clone)]
pub struct GroupBatch {
    pub trajectories: Vec<TrajectoryRecord>,
    pub epsilon_clip: f64,
    pub beta_kl: f64,
}

impl GroupBatch {
    pub fn new(trajectories: Vec<TrajectoryRecord>, epsilon_clip: f64, beta_kl: f64) -> Result<Self, GrpoError> {
        validate_group(&trajectories)?;
        Ok(Self {
            trajectories,
            epsilon_clip,
            beta_kl,
        })
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.reward).collect()
    }

    pub fn advantages(&self) -> Result<Vec<f64>, GrpoError> {
        group_advantages(&self.rewards())
    }

    pub fn uniform_weights(&self) -> Vec<f64> {
        uniform_weights(self.trajectories.len())
    }
}

pub fn uniform_weights(g: usize) -> Vec<f64> {
    vec![1.0 / g as f64; g]
}

pub(crate) fn validate_group(trajs: &[TrajectoryRecord]) -> Result<(), GrpoError> {
    if trajs.len() < 2 {
        return Err(GrpoError::GroupTooSmall(trajs.len()));
    }
    for (i, t) in trajs.iter().enumerate() {
        if t.prompt_id != trajs[0].prompt_id {
            return Err(GrpoError::MixedPrompts(trajs[0].prompt_id.clone(), t.prompt_id.clone()));
        }
        let n = t.tokens.len();
        if t.logp_old.len() != n || t.logp_ref.len() != n || t.logp_current.len() != n {
            return Err(GrpoError::RaggedRecord { index: i, tokens: n });
        }
    }
    Ok(())
}

/// Surrogate settings shared by both optimizers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Surrogate {
    pub epsilon_clip: f64,
    pub beta_kl: f64,
}

/// `Σ_i w_i (1/|o_i|) Σ_t [clipped surrogate − β·kl]`, with log-probabilities
/// of the current policy recomputed from `params`.
pub fn weighted_objective(
    trajs: &[TrajectoryRecord],
    advantages: &[f64],
    weights: &[f64],
    s: Surrogate,
    params: &PolicyParams,
) -> Result<f64, GrpoError> {
    check_lengths(trajs, advantages, weights)?;
    let terms: Vec<f64> = trajs
        .par_iter()
        .zip(advantages.par_iter())
        .map(|(tr, &a)| {
            if tr.tokens.is_empty() {
                return 0.0;
            }
            let lp = params.logprobs(&tr.prompt, &tr.tokens);
            let mut sum = 0.0;
            for t in 0..tr.tokens.len() {
                let ratio = (lp[t] - tr.logp_old[t]).exp();
                sum += clipped_surrogate(ratio, a, s.epsilon_clip) - s.beta_kl * kl_k3(tr.logp_ref[t], lp[t]);
            }
            sum / tr.tokens.len() as f64
        })
        .collect();
    Ok(terms.iter().zip(weights).map(|(t, w)| w * t).sum())
}

/// Analytic gradient of [`weighted_objective`] with respect to the weights.
///
/// Per token the coefficient on `∇ log π` is `A·ρ` when the min picks the
/// unclipped branch (zero otherwise) plus `β(ρ_ref − 1)` from the KL term,
/// scaled by `w_i / |o_i|`.
pub fn weighted_gradient(
    trajs: &[TrajectoryRecord],
    advantages: &[f64],
    weights: &[f64],
    s: Surrogate,
    params: &PolicyParams,
) -> Result<Matrix, GrpoError> {
    check_lengths(trajs, advantages, weights)?;
    let (rows, cols) = (params.weights.rows(), params.weights.cols());
    let parts: Vec<Matrix> = trajs
        .par_iter()
        .zip(advantages.par_iter().zip(weights.par_iter()))
        .map(|(tr, (&a, &w))| {
            let mut g = Matrix::zeros(rows, cols);
            if tr.tokens.is_empty() {
                return g;
            }
            let lp = params.logprobs(&tr.prompt, &tr.tokens);
            let scale = w / tr.tokens.len() as f64;
            let coeffs: Vec<f64> = (0..tr.tokens.len())
                .map(|t| {
                    let ratio = (lp[t] - tr.logp_old[t]).exp();
                    let surrogate = if unclipped_selected(ratio, a, s.epsilon_clip) {
                        a * ratio
                    } else {
                        0.0
                    };
                    let ref_ratio = (tr.logp_ref[t] - lp[t]).exp();
                    scale * (surrogate + s.beta_kl * (ref_ratio - 1.0))
                })
                .collect();
            params.accumulate_logprob_grad(&tr.prompt, &tr.tokens, &coeffs, &mut g);
            g
        })
        .collect();
    // fixed-order reduction keeps results independent of the thread count
    let mut total = Matrix::zeros(rows, cols);
    for p in &parts {
        total.add_scaled(p, 1.0);
    }
    Ok(total)
}

fn check_lengths(trajs: &[TrajectoryRecord], advantages: &[f64], weights: &[f64]) -> Result<(), GrpoError> {
    for got in [advantages.len(), weights.len()] {
        if got != trajs.len() {
            return Err(GrpoError::WeightCount {
                expected: trajs.len(),
                got,
            });
        }
    }
    Ok(())
}

impl GroupBatch {
    fn surrogate(&self) -> Surrogate {
        Surrogate {
            epsilon_clip: self.epsilon_clip,
            beta_kl: self.beta_kl,
        }
    }
}

pub fn grpo_objective(batch: &GroupBatch, params: &PolicyParams) -> Result<f64, GrpoError> {
    let adv = batch.advantages()?;
    weighted_objective(
        &batch.trajectories,
        &adv,
        &batch.uniform_weights(),
        batch.surrogate(),
        params,
    )
}

pub fn grpo_gradient(batch: &GroupBatch, params: &PolicyParams) -> Result<Matrix, GrpoError> {
    let adv = batch.advantages()?;
    weighted_gradient(
        &batch.trajectories,
        &adv,
        &batch.uniform_weights(),
        batch.surrogate(),
        params,
    )
}

/// KL-free, clip-free form `(1/G) Σ_i (1/|o_i|) Σ_t ρ_{i,t} A_i ∇ log π`,
/// evaluated with dense features. Useful for screening completions whose
/// contribution is negligible before any backward pass.
pub fn simplified_gradient(batch: &GroupBatch, params: &PolicyParams) -> Result<Matrix, GrpoError> {
    let adv = batch.advantages()?;
    let shape = &params.shape;
    let dim = shape.feature_dim();
    let vocab = params.vocab();
    let g = batch.trajectories.len() as f64;
    let mut out = Matrix::zeros(params.weights.rows(), params.weights.cols());
    for (tr, a) in batch.trajectories.iter().zip(&adv) {
        let lp = params.logprobs(&tr.prompt, &tr.tokens);
        let n = tr.tokens.len() as f64;
        for t in 0..tr.tokens.len() {
            let ratio = (lp[t] - tr.logp_old[t]).exp();
            let x = shape.features(&tr.prompt, &tr.tokens, t).dense(dim);
            let z: Vec<f64> = (0..vocab.len())
                .map(|v| (0..dim).map(|j| params.weights.get(v, j) * x[j]).sum())
                .collect();
            let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let norm: f64 = z.iter().map(|v| (v - zmax).exp()).sum();
            let chosen = vocab.index(tr.tokens[t]);
            for v in 0..vocab.len() {
                let p = (z[v] - zmax).exp() / norm;
                let indicator = if v == chosen { 1.0 } else { 0.0 };
                for j in 0..dim {
                    *out.get_mut(v, j) += ratio * a * (indicator - p) * x[j] / (g * n);
                }
            }
        }
    }
    Ok(out)
}

/// `|A_i|` per trajectory: a completion whose advantage is near zero adds
/// nothing to the update regardless of its ratio.
pub fn contribution_scores(batch: &GroupBatch) -> Result<Vec<f64>, GrpoError> {
    Ok(batch.advantages()?.into_iter().map(f64::abs).collect())
}
