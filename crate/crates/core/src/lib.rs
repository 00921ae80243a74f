//! Jointly trained product-quantization embedding index.
//!
//! A two-tower retrieval model is trained together with an indexing layer
//! (learned rotation, coarse quantizer, product quantizer). Gradients pass
//! straight through the quantizer to the item embeddings, centroids are
//! learned from a distortion regularizer, and the rotation is learned by
//! steepest block coordinate descent over Givens rotations. After training
//! the serving index is just the items' codes, so building it costs one
//! encoding pass.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod index;
pub mod kmeans;
pub mod numeric;
pub mod pipeline;
pub mod quantizer;
pub mod rotation;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use index::{EmbeddingIndex, SearchHit, SearchParams};
pub use numeric::Matrix;
pub use quantizer::{CoarseCodebook, ItemCode, PQCodebook, QuantizerLayer};
pub use rotation::{GivensFactor, RotationMatrix};
pub use trainer::{TrainConfig, TwoTowerModel};
