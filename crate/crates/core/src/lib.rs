//! Inference-free learned sparse retrieval for fuzzy text matching.
//!
//! Documents are expanded offline into sparse vectors over a granular
//! subword vocabulary; queries are encoded online by tokenization and IDF
//! alone, and both meet in an exact dot-product inverted index.

pub mod baselines;
mod codec;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod hci_sim;
pub mod index;
pub mod mining;
pub mod retrieval;
pub mod sparse;
pub mod tokenizer;

pub use error::{Error, Result};
