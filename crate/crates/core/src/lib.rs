//! Deterministic federated-learning simulator for straggler mitigation by
//! sub-model dropout.
//!
//! Stragglers train a reduced sub-model each round so that their simulated
//! time matches the slowest non-straggler. Three policies choose which hidden
//! neurons to drop:
//!
//! - [`dropout::random_mask`]: a uniformly random subset per round.
//! - [`dropout::ordered_mask`]: a fixed left prefix of every hidden layer.
//! - [`dropout::invariant_mask`]: neurons whose updates on the non-straggler
//!   clients stay under a per-layer, dynamically grown threshold.
//!
//! [`variance`] holds the companion analysis of sparsified-gradient variance
//! (keep probabilities, keep ratio, second moment, transmission bound).
//!
//! The crate is organized bottom-up:
//!
//! | module | contents |
//! |---|---|
//! | [`nn`] | dense ReLU network, cross-entropy, SGD, evaluation |
//! | [`submodel`] | neuron masks, extraction, coverage-weighted aggregation |
//! | [`dropout`] | rates, percent change, threshold controller, mask policies |
//! | [`sim`] | straggler profiling, rate choice, round loop, summaries |
//! | [`data`] | synthetic blobs, CSV I/O, IID / Dirichlet partitions |
//! | [`variance`] | sparsified-gradient variance toolkit |
//! | [`cli`] | TOML configs, batch runs, CSV / JSON outputs |

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod dropout;
pub mod error;
pub mod nn;
pub mod rng;
pub mod sim;
pub mod submodel;
pub mod tensor;
pub mod variance;

pub use error::{Error, Result};
