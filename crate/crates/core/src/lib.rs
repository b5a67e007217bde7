//! Structure-only entity alignment between knowledge graph pairs.
//!
//! The engine aligns entities across two KGs using nothing but graph
//! structure: a relation-level GNN over a merged relation graph, a pair of
//! anchor-conditioned entity encoders run in parallel on both graphs, and a
//! feature-interaction scorer. Models trained on one graph pair transfer
//! zero-shot to unseen pairs because no entity or relation identity enters
//! the features.

pub mod data;
pub mod entgnn;
pub mod error;
pub mod kg;
pub mod matcher;
pub mod pipeline;
pub mod relgnn;
pub mod relgraph;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
