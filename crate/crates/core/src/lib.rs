//! Topic-guided abstractive multi-document summarization.
//!
//! A variational neural topic model and a heterogeneous graph-to-sequence
//! summarizer are trained jointly. Topics appear as nodes of a
//! word/topic/document graph, steer a two-step topic-aware decoder, and are
//! tied to the decoder's topical focus by an inconsistency loss.
//!
//! Modules:
//! - [`corpus`]: ingestion, vocabularies, bag-of-words vectors, batching
//! - [`ntm`]: Gaussian-softmax topic model
//! - [`graph`]: heterogeneous graph and document encoder
//! - [`dge`]: node-type aware graph attention layers
//! - [`decoder`]: topic-aware copy decoder and beam search
//! - [`training`]: joint loss, training loop, checkpoints
//! - [`eval`]: ROUGE, C_v coherence, bucketed evaluation

pub mod corpus;
pub mod decoder;
pub mod dge;
pub mod error;
pub mod eval;
pub mod graph;
pub mod nn;
pub mod ntm;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
