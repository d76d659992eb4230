//! End-to-end pipeline for pre-training and benchmarking transformer models of
//! single-cell gene expression.
//!
//! The pipeline covers ingestion and quality control of sparse count matrices,
//! depth and non-zero-median normalization, rank-value tokenization with
//! annotation supervision tokens, masked-gene pre-training of a bidirectional
//! encoder with a built-in reverse-mode autodiff tape, and a donor-disjoint
//! disease benchmark harness with fine-tuning, linear probing, and a classical
//! logistic-regression baseline.

pub mod autodiff;
pub mod benchmark;
pub mod config;
pub mod corpus;
pub mod error;
pub mod model;
pub mod normalize;
pub mod tokenizer;
pub mod train;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
