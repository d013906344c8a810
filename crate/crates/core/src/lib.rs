//! Structured pruning toolkit for gated transformer encoders.

pub mod analysis;
pub mod cli;
pub mod corpus;
pub mod dyn_sparse;
pub mod encoder;
pub mod error;
pub mod grad_prune;
pub mod l0;
pub mod languages;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
