//! Reproducible desk-scale LLM pretraining with full provenance.
//!
//! The crate covers the whole release pipeline: a deterministic chunked
//! corpus with a checksummed manifest ([`corpus`]), a small LLaMA-style
//! decoder ([`model`]), an AdamW trainer that checkpoints weights, optimizer
//! moments and RNG state at every chunk boundary ([`trainer`],
//! [`registry`]), and memorization analysis across checkpoints
//! ([`analysis`]).

pub mod analysis;
pub mod config;
pub mod corpus;
pub mod error;
pub mod fsutil;
pub mod hash;
pub mod model;
pub mod pipeline;
pub mod registry;
pub mod rng;
pub mod synth;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
