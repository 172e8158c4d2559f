//! Sequence-to-sequence Transformer with L0Drop: stochastic HardConcrete gates
//! that prune encoder outputs, plus count-softmax sparse cross-attention for
//! decoding over the shortened memory.

pub mod analysis;
pub mod error;
pub mod hardconcrete;
pub mod kv;
pub mod l0drop;
pub mod numcore;
pub mod patterns;
pub mod sparse_decode;
pub mod trainer;
pub mod transformer;

pub use error::{Error, Result};
