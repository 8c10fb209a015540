//! Command-line front end and file formats for the session recommender.
//!
//! The binary wires a fixed pipeline over a working directory:
//! `synth`/`preprocess` produce a versioned session store, `train` fits a
//! checkpoint, `evaluate`/`recommend`/`ablate`/`plot-data` consume both.
//! All numeric work lives in `sessrec-core`.

pub mod artifacts;
pub mod commands;
pub mod config;
