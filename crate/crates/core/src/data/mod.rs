//! Corpora, faithful generation by BOS sampling, dataset statistics and
//! activation capture.

mod activations;
mod corpus;
mod generate;
mod stats;

pub use activations::{capture, model_input, ActivationStore};
pub use corpus::{Corpus, SourceTag, FTOK_MAGIC};
pub use generate::{generate_faithful, generate_random_corpus, FaithfulOptions};
pub use stats::{dataset_stats, first_token_distribution, kl_divergence, smoothing_alpha, DatasetStats};
