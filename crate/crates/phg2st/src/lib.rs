//! Spatial gene expression prediction from histology features with
//! ST-prompt guided hypergraph learning.
//!
//! The crate is organized around a small reverse-mode autodiff engine
//! ([`tensor`]), hypergraph construction and convolution ([`hypergraph`]),
//! the two-branch prompt-guided model ([`model`]), and the training /
//! evaluation loop ([`train`], [`eval`]) with slide bundles on disk
//! ([`data`]). Start with the runnable examples:
//!
//! ```text
//! cargo run --release --example generate_data
//! cargo run --release --example autodiff_basics
//! cargo run --release --example hypergraph_basics
//! cargo run --release --example train_model
//! cargo run --release --example evaluate_checkpoint
//! cargo run --release --example cross_validate
//! ```
//!
//! The same capabilities are exposed by the thin `phg2st` binary
//! (`synth`, `train`, `eval`, `cv`, `sweep` subcommands).

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod hypergraph;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
