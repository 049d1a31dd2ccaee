//! Conditional continuous-diffusion caption generation, end to end:
//! BPE tokenizer, noise schedules, a minimal reverse-mode autodiff engine,
//! a transformer denoiser over token embeddings, the masked end-to-end
//! training objective, an Adam trainer, a reverse-diffusion sampler with
//! nearest-embedding rounding, caption metrics, and the `capdiff` CLI.
//!
//! Everything is deterministic given a seed: seeded ChaCha8 streams, no
//! iteration over unordered maps on any output path, and parallelism only
//! across independent units collected in index order.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod model;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
