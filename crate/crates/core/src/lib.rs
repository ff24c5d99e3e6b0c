//! Contrastive image-text alignment with adaptive loss-weight scheduling.
//!
//! The crate trains a pair of linear projection heads that map frozen image
//! and text feature vectors into a shared unit-sphere embedding space under a
//! symmetric InfoNCE objective. The two directional loss terms are weighted by
//! a [`scheduler`] that adapts the weights once per epoch from statistics of
//! the batch similarity matrices.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod linalg;
pub mod loss;
pub mod manifest;
pub mod scheduler;
pub mod trainer;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use scheduler::{LossWeights, Strategy};
