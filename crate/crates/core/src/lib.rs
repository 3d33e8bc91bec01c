//! Multi-model medication recommendation with peer-review consensus.
//!
//! A clinical note is sent to an ensemble of language models. Every member
//! proposes a medication plan, reviews its peers' plans anonymously, and the
//! Vancouver consensus over the resulting grade matrix selects the answer.
//! Run logs feed the metrics and the ensemble recommender.

pub mod backend;
pub mod chemistry;
pub mod consensus;
pub mod domain;
pub mod metrics;
pub mod pipeline;
pub mod sampling;
pub mod scoring;
pub mod store;
