//! Numeric kernel shared by every other module.

mod adam;
mod matrix;
mod ops;
mod rng;

pub use adam::{AdamConfig, AdamState};
pub use matrix::{dot, vecmat, vecmat_into, Matrix, FMAT_HEADER_LEN, FMAT_MAGIC};
pub use ops::{argmax, cosine, log_softmax, norm, softmax, Cosine};
pub(crate) use ops::softmax_unchecked;
pub use rng::Rng;
