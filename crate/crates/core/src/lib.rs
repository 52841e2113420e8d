//! KV-cache eviction with global attention scores.
//!
//! The crate replays decoding traces through a budgeted KV cache, comparing
//! eviction policies that rank tokens by window attention (local scores),
//! decayed cross-window history (global scores), accumulated attention and
//! key redundancy. Around the engine sit a binary trace format, a small
//! deterministic transformer for closed-loop runs, the sparse attention masks
//! implied by an eviction log, training-side objectives, memory estimators and
//! the diagnostic analyses.

pub mod analysis;
pub mod cli;
pub mod engine;
pub mod error;
pub mod scoring;
pub mod tensor;
pub mod toy;
pub mod trace;
pub mod train;

pub use engine::{run, EvictionConfig, EvictionLog, Policy, RunMetrics, TieBreak};
pub use error::{Error, Result};
pub use trace::{DecodeTrace, TraceDims};
