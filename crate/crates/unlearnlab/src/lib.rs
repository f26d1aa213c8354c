//! Desk-scale laboratory for LLM unlearning.
//!
//! Everything runs on CPU with 64-bit floats and exact reverse-mode
//! gradients: toy autoregressive models, distribution-level preference
//! objectives with likelihood/KL/preference baselines, a synthetic
//! closed-vocabulary QA corpus with forget/retain/holdout splits, an
//! unlearning trainer, and the forgetting/utility metric suite.

pub mod data;
pub mod distributions;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
