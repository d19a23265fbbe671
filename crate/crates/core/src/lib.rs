//! Synthetic multi-label training data from a text-to-image generator, and a
//! dual-prompt zero-shot multi-label classifier trained on it.

pub mod ablation;
pub mod backends;
pub mod builder;
pub mod classifier;
pub mod data;
pub mod error;
pub mod filter;
pub mod image;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod prompts;
pub mod report;
pub mod seed;
pub mod tuner;

pub use error::{Error, Result};
