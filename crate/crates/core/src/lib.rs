//! Sentence-level style change detection with a sequential sentence pair
//! classifier: sentence vectors, a stacked bidirectional LSTM, and an MLP
//! that scores every adjacent sentence pair for a change of author.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod featurize;
pub mod llm_baseline;
pub mod model;
pub mod numerics;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
