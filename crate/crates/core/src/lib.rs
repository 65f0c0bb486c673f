//! Adaptive multimodal retrieval-augmented generation.
//!
//! The crate is organized around the life of a query:
//!
//! - [`kb_store`] loads modality-partitioned document collections.
//! - [`embedding`] turns text (and optional image references) into unit vectors.
//! - [`flat_retriever`] performs exact top-k cosine search and offline IR metrics.
//! - [`router`] decides per query whether to skip retrieval or which modality to use.
//! - [`generation`] renders prompts and talks to a chat-completion endpoint.
//! - [`eval_metrics`] scores answers with token F1 and exact match.
//! - [`pipeline`] wires the stages together and measures them.
//! - [`curation`] turns plain QA data into routing labels and noise-resistance
//!   tuning data by scoring the generator under every retrieval strategy.

pub mod curation;
pub mod embedding;
pub mod error;
pub mod eval_metrics;
pub mod flat_retriever;
pub mod generation;
pub mod jsonl;
pub mod kb_store;
pub mod pipeline;
pub mod router;

mod hashing;
mod http;

pub use error::{Error, Result, Stage};
pub use kb_store::{Document, KnowledgeBase, Modality};
