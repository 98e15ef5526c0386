//! Perception-free driving world model.
//!
//! A frozen random-projection encoder turns ray-cast observations into
//! feature tokens; a causal transformer backbone infers per-frame future
//! representations; a rectified flow-matching planner decodes trajectories,
//! supervised together with future feature, depth and semantic forecasting
//! heads. A second stage fine-tunes the planner alone with flow-matching
//! group-relative policy optimization against a simulated rollout reward.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod planner;
pub mod geometry;
pub mod grpo;
pub mod heads;
pub mod model;
pub mod nn;
pub mod rng;
pub mod train;
pub mod world;

pub use error::{Error, Result};
