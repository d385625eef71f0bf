//! Medication recommendation from hierarchical ontology embeddings and a
//! sparsified co-occurrence graph.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod cooccurrence;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod export;
pub mod fusion;
pub mod geometry;
pub mod hierarchy;
pub mod matrix;
pub mod model;
pub mod objective;
pub mod ontology;
pub mod patient;
pub mod synthetic;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
pub use matrix::Mat;
