//! Unsupervised inference of a labeling that linear probes can learn in two
//! fixed representation spaces at once.
//!
//! The pipeline: [`embeddings`] loads the two spaces, [`meta_opt`] trains a
//! [`task_encoder`] per seed by differentiating a probe's held-out error
//! through the [`inner_solver`], [`aggregation`] merges seeds and picks
//! reliable samples, and [`evaluation`] scores everything against ground
//! truth. [`synthetic`] builds certified fixtures and [`cli`] wires it all to
//! the command line.

pub mod aggregation;
pub mod cli;
pub mod embeddings;
pub mod error;
pub mod evaluation;
pub mod inner_solver;
pub mod meta_opt;
pub mod synthetic;
pub mod task_encoder;

pub use error::{Error, Result};
