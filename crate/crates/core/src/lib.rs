//! Zero-shot video object segmentation at desk scale: a small reverse-mode
//! tensor engine, the three-stage segmentation pipeline built on it, a
//! synthetic video generator, and the training/evaluation harness.

pub mod ablate;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod parallel;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Bins, Tape, Tensor, Var};
