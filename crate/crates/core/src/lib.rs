//! Mixed-dimension KV cache compression.
//!
//! Assigns each cached token a per-head PCA rank from a candidate set so as to
//! minimize an attention-output accuracy-loss score under a hard memory
//! budget, solves the allocation by Lagrangian-dual bisection, and decodes
//! exactly over the resulting group-packed compressed cache.

pub mod error;
pub mod linalg;
pub mod pca;

pub use error::{Error, Result};
