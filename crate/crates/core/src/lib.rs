//! Retrieval-augmented generation for dynamic graph link prediction.
//!
//! The crate is `no_std` (with `alloc`) and carries every algorithmic piece of
//! the pipeline:
//!
//! - [`numerics`]: dense `f64` tensors with a reverse-mode tape, Adam and a
//!   finite-difference gradient checker.
//! - [`graphdata`]: temporal edge lists, equal-width time binning, temporal
//!   splits and a planted synthetic generator.
//! - [`sequencer`]: the token alphabet and ego-sequence construction.
//! - [`backbone`]: a decoder-only transformer trained with next-token loss.
//! - [`retriever`]: pool annotation, time- and context-aware contrastive
//!   training, ranking and lexical baselines.
//! - [`fusion`]: summary-graph construction, GCN readout and prefix-conditioned
//!   generation.
//! - [`metrics`]: Recall@k, NDCG@k, Jaccard and run aggregation.
//!
//! File formats, checkpoints and the command line live in the `dygrag` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod backbone;
pub mod error;
pub mod fusion;
pub mod graphdata;
pub mod metrics;
pub mod numerics;
pub mod retriever;
pub mod sequencer;

pub use error::{Error, Result};
