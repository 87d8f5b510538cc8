//! Caption-preference reward modelling and corpus compression.
//!
//! The pipeline: a [`store`] of human caption rankings, [`pairgen`] turning
//! rankings into comparison pairs, a [`head`] trained on frozen
//! [`embedding`]s, a [`compressor`] keeping the top-scoring fraction of a
//! corpus, and an [`evaluator`] comparing scorers against human choices.

pub mod compressor;
pub mod digest;
pub mod embedding;
pub mod evaluator;
pub mod head;
pub mod ids;
pub mod pairgen;
pub mod rng;
pub mod store;
pub mod synth;
