//! Skeleton action recognition from multi-order hyper-edge attention,
//! self-contained and CPU-only.
//!
//! The pipeline: skeleton sequences are normalized and split into temporal
//! blocks; a per-joint MLP embeds each block; permutation-equivariant
//! transformer branches encode hyper-edges of orders 1..r per block; the
//! per-order features are assembled into one multi-order tensor; attention
//! modules pool it over hyper-edges and temporal blocks into a fixed-width
//! vector for classification. Everything trains through the reverse-mode
//! tape in [`tensor::tape`].

pub mod error;
pub mod fusion;
pub mod hot;
pub mod hypergraph;
pub mod skeleton;
pub mod train;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Reduction, Tensor};
