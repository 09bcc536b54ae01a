//! Named entity normalization by edge-weight distribution matching.
//!
//! Two graphs are built over query and dictionary entities: a ground-truth
//! graph linking entities that share a concept ID, and a similarity graph
//! whose per-query top-K edges carry max-normalized inner products of
//! encoder embeddings. Training moves the encoder so that the softmax of the
//! similarity edge weights matches the softmax of the ground-truth edges
//! under KL divergence. Inference returns the highest-weight dictionary
//! entity for each query.

pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod inference;
pub mod optim;
pub mod trainer;

pub use error::{Error, Result};
