//! Structural-causal-model pipeline for conversations.
//!
//! A conversation is modeled as a linear SCM over its utterances: each
//! utterance representation is a weighted combination of its predecessors
//! (explicit causes, collected in a strictly lower triangular causal
//! strength matrix `A`) plus an exogenous per-utterance term (the implicit
//! cause). The crate provides:
//!
//! - [`numerics`]: dense f64 matrices with a reverse-mode gradient tape,
//!   enough for the model's forward/backward passes.
//! - [`scm`]: SCM data types, ancestral sampling, the synthetic dataset
//!   generator, and a residual-independence direction diagnostic.
//! - [`model`]: the variational graph autoencoder (attention encoder,
//!   latent implicit causes, decoder through `(I-A)^{-1}`) and its task
//!   heads.
//! - [`train`]: Adam training loop, multi-run protocol, paired t-test.
//! - [`eval`]: explicit/implicit cause extraction metrics, causal
//!   discriminability, confounder error counting, PCA latent export.
//! - [`data`]: dataset serialization, embedding sidecars, manifests.
//! - [`simgen`]: skeleton-controlled simulated dialogue generation via a
//!   chat-completion backend, with an offline canned backend.

pub mod numerics;
pub mod rng;

pub use numerics::{Matrix, NumericsError};
pub use rng::SplitMix64;
