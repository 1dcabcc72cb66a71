//! Consensus optimisation from pairwise votes of socially influenced agents.

pub mod aggregation;
pub mod engine;
pub mod error;
pub mod inference;
pub mod kernels;
mod likelihood;
pub mod point;
pub mod preference;
pub mod sim;
pub mod social_graph;
pub mod solver;

pub use error::{Result, SboError};
