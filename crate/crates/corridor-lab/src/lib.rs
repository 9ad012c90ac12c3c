//! Scene-adaptive trajectory prediction at desk scale.
//!
//! The pipeline: parse or generate per-scene tracklets, window them into
//! (past, future) samples, train a small heatmap predictor, then adapt it
//! to individual scenes with learnable rank-1 spatial prompts. Metrics and
//! a config-driven sweep harness sit on top.

pub mod autograd;
pub mod baselines;
pub mod core;
pub mod corridor;
pub mod harness;
pub mod heatmap;
pub mod ingest;
pub mod metrics;
pub mod parallel;
pub mod predictor;
pub mod synthgen;
