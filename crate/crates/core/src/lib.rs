//! A single encoder-decoder that decides whether a dialogue turn needs
//! external knowledge, writes the search query, and generates the grounded
//! response, each selected by a task prompt.

pub mod config;
pub mod corpus;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod prompts;
pub mod retrieval;
pub mod synthetic;
pub mod training;
pub mod types;
pub mod workflow;

pub use types::*;
