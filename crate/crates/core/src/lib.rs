//! Descriptiveness-aware image-text matching.
//!
//! Sentence descriptiveness from cumulative TF-IDF ([`corpus`]), adaptive
//! triplet and generic-to-specific ordering losses with analytic gradients
//! ([`losses`]), a projection-model trainer over precomputed features
//! ([`trainer`]), retrieval and hierarchy metrics ([`eval`]) and a synthetic
//! hierarchical corpus generator ([`datagen`]).

pub mod corpus;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod trainer;

pub use error::{Error, Result};
