//! TopK sparse autoencoder.
//!
//! Encoding keeps the `k` largest signed pre-activations of each row (ties go
//! to the lower index) and zeroes the rest. Besides the fused encode and
//! decode, the row-sum and column-concatenation forms of both maps are
//! provided as independent oracles. Training uses Adam with hand-derived
//! gradients, treating the TopK selection as a fixed mask, and renormalizes
//! decoder rows after every step.

mod model;
mod train;

#[cfg(test)]
mod tests;

pub use model::{topk_indices, topk_rows, SaeConfig, SaeGrads, SparseCodes, TopKSae};
pub use train::{train_sae, SaeTrainer, TrainConfig, TrainReport};
