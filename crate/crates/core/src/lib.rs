//! Continuous concept removal for text-conditioned noise predictors.
//!
//! A frozen teacher supplies negative-guidance targets; a trainable student
//! is distilled away from one concept at a time while an alignment term keeps
//! it close to the teacher on calibration prompts found by a genetic search.

pub mod backend;
pub mod calibration;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod hierarchy;
pub mod llm;
pub mod norm;
pub mod removal;
pub mod scenario;
pub mod text;

pub use error::{Error, Result};
