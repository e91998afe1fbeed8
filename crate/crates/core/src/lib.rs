//! Retrieve, rerank and read: an open-domain question answering engine over
//! precomputed neural scores.

pub mod annotate;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod index;
pub mod io;
pub mod math;
pub mod pipeline;
pub mod pruner;
pub mod reader;
pub mod reranker;

pub use error::{Error, Result};
