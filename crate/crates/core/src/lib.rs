//! Tools for designing base training sets for few-shot image classification
//! over precomputed embeddings.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod learner;
pub mod relabel;
pub mod rng;
pub mod runner;
pub mod selection;
pub mod stats;
pub mod synth;
pub mod vector;

pub use dataset::{ClassInfo, EmbeddingDataset, KeepMap, Provenance, RelabelMap};
pub use error::{Error, Result};
