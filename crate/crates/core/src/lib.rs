//! Reinforcement fine-tuning for time-series forecasting with a small,
//! fully inspectable policy: multi-term rewards, group-relative policy
//! optimization, granularity-aware sampling and a supervised warm-up stage.

// `!(x > 0.0)` rejects NaN too; index loops mirror the math they implement.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod codec;
pub mod config;
pub mod data;
pub mod grip;
pub mod grpo;
pub mod policy;
pub mod reward;
pub mod seed;
pub mod series;
pub mod sft;
pub mod textio;
pub mod trainer;

#[cfg(test)]
mod testkit;
