//! LazyStrike: frequency-guided channel-wise Top-K pooling for Vision
//! Transformers, the patch-level diagnostics used to study aggregation
//! artifacts (Patch Score, Point-in-Box, masking probes, object discovery,
//! PCA), and a desk-scale ViT to train and probe them on.

// `!(x > 0.0)` is the intended spelling: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod exec;
pub mod io;
pub mod lazystrike;
pub mod metrics;
pub mod spectral;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use exec::Execution;
pub use lazystrike::{FeatureMap, LazyStrikeParams, PooledToken};
pub use tensor::{Tape, Tensor, Var};
