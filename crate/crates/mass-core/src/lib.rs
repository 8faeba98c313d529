//! Core library for context-aware GAN trace synthesis: trace data model,
//! ingestion pipeline, evaluation metrics, the recurrent GAN with its losses
//! and gradients, the conditional-gradient-descent trainer, and the
//! statistical baseline generators.

pub mod baselines;
pub mod checkpoint;
pub mod context;
pub mod gan;
pub mod metrics;
pub mod synth;
pub mod trainer;
pub mod trace;
