//! Adversarial imitation of goal-directed visual search.
//!
//! A searcher's state is a cumulatively foveated image encoded on a 10×16
//! grid; actions are saccades to grid cells. A policy trained by PPO against
//! a discriminator reward learns to reproduce expert fixations, and the
//! metrics module scores generated scanpaths against human-style data.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gail;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod retina;
pub mod rng;
pub mod search_env;
pub mod synth;

pub use error::{GazeError, Result};
