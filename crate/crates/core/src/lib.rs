// SPDX-License-Identifier: MIT OR Apache-2.0

//! # depthscope
//!
//! A small, fully instrumented decoder-only sparse-MoE transformer together
//! with layer-wise probes for studying how depth is used across the turns of
//! a multi-turn agent trajectory.
//!
//! - [`numerics`]: dense f32 kernels with f64 accumulation and fixed
//!   summation order, so every trace is bit-reproducible.
//! - [`model`]: pre-norm attention + top-K MoE blocks, a residual trace
//!   recorder, and the weight container format.
//! - [`trajectory`]: Thought/Action/Observation transcripts, a byte-level
//!   tokenizer with role markers and turn offsets, and a synthetic generator.
//! - [`causal`]: layer-skip interventions, the Future Effect map and the
//!   logit change profile.
//! - [`probes`]: residual cosine regimes, logit lens curves and the three
//!   effective-depth criteria.
//! - [`pipeline`]: run configuration, per-turn sweeps, CSV/JSON/SVG artifacts
//!   and a digest manifest.

pub mod causal;
pub mod error;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod probes;
pub mod trajectory;

pub use error::{Error, Result};
