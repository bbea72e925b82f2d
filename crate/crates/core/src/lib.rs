//! RNA secondary-structure prediction laboratory: an axial-attention network
//! over a pairwise latent grid with latent recycling, a Nussinov-style
//! folding oracle that generates ground-truth structures, a synthetic-family
//! dataset pipeline, and the training/evaluation machinery tying them
//! together.

pub mod data;
pub mod fold;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use rng::StreamRng;
pub use tensor::{Graph, Scalar, TensorId};
