//! Tiny decoder-only language model: the subject whose hidden states the
//! autoencoders decompose.

mod backward;
mod config;
mod io;
pub mod grammar;
mod model;
mod sample;
mod train;

pub use config::LmConfig;
pub use model::{Block, ForwardOutput, HiddenCapture, LayerNorm, TinyLm};
pub use sample::{next_token_distribution, sample, DecodeState, SampleOptions};
pub use train::{mean_cross_entropy, train_lm, with_bos, LmTrainOptions, LmTrainReport};

pub use backward::cross_entropy_sum;
