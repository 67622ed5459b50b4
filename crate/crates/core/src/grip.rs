//! Granularity-aware elite sampling and importance-weighted policy updates.
//!
//! A rollout produces `k·G` candidates per prompt. A sampling strategy keeps
//! `G` elites, each elite gets a softmax weight over its score, and the
//! clipped surrogate is averaged with those weights instead of `1/G`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grpo::{group_advantages, validate_group, weighted_gradient, weighted_objective, GrpoError, Surrogate};
use crate::policy::{Matrix, PolicyParams, TrajectoryRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GripError {
    #[error("invalid GRIP configuration: {0}")]
    Config(String),
    #[error("candidate pool has {got} trajectories, expected k·G = {expected}")]
    PoolSize { expected: usize, got: usize },
    #[error(transparent)]
    Group(#[from] GrpoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    #[default]
    LocalRandom,
    ClusterRandom,
}

impl std::str::FromStr for SamplingStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "local_random" => Ok(Self::LocalRandom),
            "cluster_random" => Ok(Self::ClusterRandom),
            o => Err(format!(
                "unknown strategy '{o}' (expected local_random or cluster_random)"
            )),
        }
    }
}

impl std::fmt::Display for SamplingStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::LocalRandom => "local_random",
            Self::ClusterRandom => "cluster_random",
        })
    }
}

/// What the softmax weights are computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    #[default]
    Reward,
    /// Every elite scores 0, so weights are exactly `1/G`.
    Constant,
}

impl std::str::FromStr for ScoreKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reward" => Ok(Self::Reward),
            "constant" => Ok(Self::Constant),
            o => Err(format!("unknown score kind '{o}' (expected reward or constant)")),
        }
    }
}

impl std::fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Reward => "reward",
            Self::Constant => "constant",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GripConfig {
    pub k: usize,
    pub group_size: usize,
    pub strategy: SamplingStrategy,
    pub clusters: usize,
    pub weight_temperature: f64,
    pub epsilon_clip: f64,
    pub beta_kl: f64,
    pub score: ScoreKind,
}

impl Default for GripConfig {
    fn default() -> Self {
        Self {
            k: 3,
            group_size: 16,
            strategy: SamplingStrategy::LocalRandom,
            clusters: 4,
            weight_temperature: 1.0,
            epsilon_clip: 0.2,
            beta_kl: 0.04,
            score: ScoreKind::Reward,
        }
    }
}

impl GripConfig {
    pub fn validate(&self) -> Result<(), GripError> {
        let bad = |m: String| Err(GripError::Config(m));
        if self.k < 1 {
            return bad(format!("k must be >= 1, got {}", self.k));
        }
        if self.group_size < 2 {
            return bad(format!("group_size must be >= 2, got {}", self.group_size));
        }
        if self.clusters < 1 {
            return bad(format!("clusters must be >= 1, got {}", self.clusters));
        }
        if !(self.weight_temperature > 0.0) || !self.weight_temperature.is_finite() {
            return bad(format!(
                "weight_temperature must be positive, got {}",
                self.weight_temperature
            ));
        }
        if !(self.epsilon_clip >= 0.0) {
            return bad(format!("epsilon_clip must be non-negative, got {}", self.epsilon_clip));
        }
        if !(self.beta_kl >= 0.0) {
            return bad(format!("beta_kl must be non-negative, got {}", self.beta_kl));
        }
        Ok(())
    }

    pub fn pool_size(&self) -> usize {
        self.k * self.group_size
    }

    fn surrogate(&self) -> Surrogate {
        Surrogate {
            epsilon_clip: self.epsilon_clip,
            beta_kl: self.beta_kl,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CandidatePool {
    pub candidates: Vec<TrajectoryRecord>,
}

impl CandidatePool {
    pub fn new(candidates: Vec<TrajectoryRecord>, cfg: &GripConfig) -> Result<Self, GripError> {
        if candidates.len() != cfg.pool_size() {
            return Err(GripError::PoolSize {
                expected: cfg.pool_size(),
                got: candidates.len(),
            });
        }
        validate_group(&candidates)?;
        Ok(Self { candidates })
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.candidates.iter().map(|c| c.reward).collect()
    }
}

#[derive(Debug, Clone)]
pub struct EliteSelection {
    pub elites: Vec<TrajectoryRecord>,
    /// Position of each elite in the pool.
    pub pool_indices: Vec<usize>,
    pub weights: Vec<f64>,
}

impl EliteSelection {
    pub fn rewards(&self) -> Vec<f64> {
        self.elites.iter().map(|e| e.reward).collect()
    }
}

/// Elite of block `g` is the best of candidates `g·k .. (g+1)·k`; ties go to
/// the lower index.
pub fn sample_local_random(rewards: &[f64], k: usize, group_size: usize) -> Vec<usize> {
    (0..group_size)
        .map(|g| {
            let block = g * k..(g + 1) * k;
            block.fold(g * k, |best, i| if rewards[i] > rewards[best] { i } else { best })
        })
        .collect()
}

pub const KMEANS_MAX_ITER: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignment: Vec<usize>,
    pub centroids: Vec<f64>,
}

impl Clustering {
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.centroids.len()];
        for (i, &c) in self.assignment.iter().enumerate() {
            m[c].push(i);
        }
        m
    }
}

/// Lloyd's algorithm on scalars with `min(c, distinct)` clusters seeded at
/// evenly spaced positions of the sorted distinct values. Empty clusters keep
/// their centroid; assignment ties go to the lower centroid.
pub fn kmeans_1d(values: &[f64], c: usize, max_iter: usize) -> Clustering {
    let mut distinct: Vec<f64> = values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let c = c.min(distinct.len()).max(1);
    let n = distinct.len();
    let mut centroids: Vec<f64> = if c == 1 {
        vec![distinct.get((n.max(1) - 1) / 2).copied().unwrap_or(0.0)]
    } else {
        (0..c).map(|j| distinct[j * (n - 1) / (c - 1)]).collect()
    };
    let nearest = |v: f64, cs: &[f64]| {
        let mut best = 0;
        for (j, cj) in cs.iter().enumerate() {
            if (v - cj).abs() < (v - cs[best]).abs() {
                best = j;
            }
        }
        best
    };
    let mut assignment: Vec<usize> = values.iter().map(|&v| nearest(v, &centroids)).collect();
    for _ in 0..max_iter {
        let mut sums = vec![0.0; c];
        let mut counts = vec![0usize; c];
        for (&v, &a) in values.iter().zip(&assignment) {
            sums[a] += v;
            counts[a] += 1;
        }
        for j in 0..c {
            if counts[j] > 0 {
                centroids[j] = sums[j] / counts[j] as f64;
            }
        }
        let next: Vec<usize> = values.iter().map(|&v| nearest(v, &centroids)).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    Clustering { assignment, centroids }
}

/// Round-robin over a shuffled cluster order, drawing uniformly without
/// replacement inside each cluster and skipping exhausted clusters.
pub fn sample_cluster_random<R: Rng + ?Sized>(
    rewards: &[f64],
    clusters: usize,
    group_size: usize,
    rng: &mut R,
) -> Vec<usize> {
    let clustering = kmeans_1d(rewards, clusters, KMEANS_MAX_ITER);
    let members = clustering.members();
    let mut order: Vec<usize> = (0..members.len()).filter(|&c| !members[c].is_empty()).collect();
    order.shuffle(rng);
    let mut remaining = members.clone();
    let mut out = Vec::with_capacity(group_size);
    while out.len() < group_size {
        if order.iter().all(|&c| remaining[c].is_empty()) {
            // only reachable when G exceeds the pool
            remaining = members.clone();
        }
        for &c in &order {
            if out.len() == group_size {
                break;
            }
            let pool = &mut remaining[c];
            if pool.is_empty() {
                continue;
            }
            let j = rng.random_range(0..pool.len());
            out.push(pool.remove(j));
        }
    }
    out
}

/// `softmax(scores / τ)` with max subtraction.
pub fn adaptive_weights(scores: &[f64], tau: f64) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| ((s - m) / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

pub fn select_elites<R: Rng + ?Sized>(pool: &CandidatePool, cfg: &GripConfig, rng: &mut R) -> EliteSelection {
    let rewards = pool.rewards();
    let pool_indices = match cfg.strategy {
        SamplingStrategy::LocalRandom => sample_local_random(&rewards, cfg.k, cfg.group_size),
        SamplingStrategy::ClusterRandom => sample_cluster_random(&rewards, cfg.clusters, cfg.group_size, rng),
    };
    let elites: Vec<TrajectoryRecord> = pool_indices.iter().map(|&i| pool.candidates[i].clone()).collect();
    let scores: Vec<f64> = match cfg.score {
        ScoreKind::Reward => elites.iter().map(|e| e.reward).collect(),
        ScoreKind::Constant => vec![0.0; elites.len()],
    };
    EliteSelection {
        weights: adaptive_weights(&scores, cfg.weight_temperature),
        elites,
        pool_indices,
    }
}

/// Weighted clipped objective; advantages are normalized over the elites.
pub fn grip_objective(sel: &EliteSelection, cfg: &GripConfig, params: &PolicyParams) -> Result<f64, GripError> {
    let adv = group_advantages(&sel.rewards())?;
    Ok(weighted_objective(
        &sel.elites,
        &adv,
        &sel.weights,
        cfg.surrogate(),
        params,
    )?)
}

/// Gradient of [`grip_objective`]; the weights are constants of the
/// selection.
pub fn grip_gradient(sel: &EliteSelection, cfg: &GripConfig, params: &PolicyParams) -> Result<Matrix, GripError> {
    let adv = group_advantages(&sel.rewards())?;
    Ok(weighted_gradient(
        &sel.elites,
        &adv,
        &sel.weights,
        cfg.surrogate(),
        params,
    )?)
}
