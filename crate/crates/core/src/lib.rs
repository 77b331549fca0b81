//! Gated toxicity avoidance over small n-gram language models.
//!
//! The crate trains every model it needs from a synthetic topic corpus:
//! a base LM, toxicity-aware LMs for three decoding-time detoxification
//! operators, a toxicity gate, and evaluation classifiers. The decoder
//! applies an operator only at steps where the gate flags the sampled
//! candidate.

pub mod bench;
pub mod bundle;
pub mod classifier;
pub mod config;
pub mod corpus;
pub mod ctg;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod grammar;
pub mod ngram;
pub mod vocab;

pub use error::{Error, Result};
