//! Coupled dynamic user/item embeddings over timestamped interaction streams,
//! with a dependency-aware batch scheduler for training.

pub mod cli;
pub mod error;
pub mod evalkit;
pub mod ingest;
pub mod model;
pub mod numcore;
pub mod synth;
pub mod tbatch;
pub mod trainer;

pub use error::{Error, Result};
