//! Toolkit for training TopK sparse autoencoders on a language model's own
//! samples and measuring how faithfully they decompose its hidden states.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod lm;
pub mod matching;
pub mod math;
pub mod metrics;
pub mod probing;
pub mod sae;

pub use error::{Error, Result};
