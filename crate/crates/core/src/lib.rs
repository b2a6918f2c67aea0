//! Facial valence/arousal estimation with two levels of attention and a
//! two-stage multi-task head, on a small self-contained autodiff core.
//!
//! The pieces, bottom to top:
//!
//! - [`diffcore`]: tensors, the differentiation tape, finite-difference checks
//!   and the tensor archive format used for checkpoints.
//! - [`attention`]: residual attention blocks (trunk and hourglass mask).
//! - [`fusion`]: level embeddings, bidirectional RNN and self-attention pooling.
//! - [`heads`]: the categorical/dimensional heads and the weighted objective.
//! - [`objective`]: squared and Tukey losses, RMSE and CCC.
//! - [`data`]: manifests, preprocessing, augmentation and synthetic faces.
//! - [`train`]: optimizer, schedule, checkpoints, training, evaluation and ablations.

pub mod attention;
pub mod data;
pub mod diffcore;
mod error;
pub mod fusion;
pub mod heads;
pub mod model;
pub mod nn;
pub mod objective;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
