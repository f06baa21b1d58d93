//! Human-object interaction detection and anticipation.
//!
//! The crate bundles a small autodiff tensor engine, the dual cross-attention
//! interaction model with multi-horizon heads, two-stage training, an HOI
//! evaluator, a behavior-tree planner with fluency metrics, and the data and
//! benchmark plumbing the command-line tool is built on.

pub mod bt;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
