//! Three-stage training of a token-based text-to-speech policy on a
//! synthetic multilingual world: supervised pretraining, low-resource
//! fine-tuning with data mixing, and online GRPO alignment against
//! automatic judges, with a DPO baseline for comparison.

pub mod cli;
pub mod error;
pub mod evalharness;
pub mod fixtures;
pub mod io;
pub mod policy;
pub mod rewards;
pub mod rng;
pub mod synthworld;
pub mod tokens;
pub mod trainers;

pub use error::{Error, Result};
