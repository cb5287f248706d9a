//! Discrete diffusion engine for reranking short item lists.
//!
//! A logged arrangement of items is gradually corrupted by random swaps (or
//! per-slot substitutions); a small attention model learns to run that chain
//! backwards conditioned on the feedback the arrangement received. At
//! serving time the reverse process starts from the upstream ranker's order,
//! is conditioned on all-positive feedback, and beam search plus a learned
//! sequence evaluator pick the rearrangement to show.
//!
//! Module map:
//!
//! * [`perm`] — permutation ranks, distances, swap neighborhoods, and the
//!   [`perm::ItemSequence`] arrangement type;
//! * [`forward`] — the two corruption chains, their cumulative kernels, and
//!   exact posteriors (the training targets);
//! * [`chain`] — executable checks that the chains are doubly stochastic,
//!   ergodic, and actually converge to uniform;
//! * [`model`] — the conditional denoiser, the sequence evaluator, and their
//!   exact gradients;
//! * [`engine`] — training loop and beam-search reverse process;
//! * [`data`] — session records, CSV I/O, and the synthetic world generator;
//! * [`metrics`] — ranking metrics (AUC, NDCG) and the paired bootstrap;
//! * [`config`] — run configuration shared by the CLI subcommands;
//! * [`cli`] — the command-line interface implementation.

pub mod chain;
pub mod cli;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod forward;
pub mod metrics;
pub mod model;
pub mod perm;

pub use error::{Error, ErrorKind, Result};
