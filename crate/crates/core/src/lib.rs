//! Core of a price-aware session recommender.
//!
//! Sessions are short anonymous purchase sequences. Besides the usual
//! interest signal (which items were bought), the model here also tracks a
//! price signal: absolute prices are discretized into per-category price
//! levels, items and their features (price level, category, brand) are wired
//! into a heterogeneous hypergraph, node embeddings are learned with a
//! triple-level convolution, and each session yields two preference vectors
//! (price and interest) trained under a joint two-task objective.
//!
//! The crate is `no_std`-compatible (`alloc` required); all file formats,
//! IO and the command-line front end live in the companion `sessrec` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod convolution;
pub mod dataset;
pub mod eval;
pub mod hypergraph;
pub mod model;
pub mod params;
pub mod preference;
pub mod price;
pub mod rng;
pub mod synth;
pub mod train;

pub use params::{AdamParams, ParamId, ParameterStore};
pub use rng::Rng;
