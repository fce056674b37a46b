//! Self-contained float64 neural network core.
//!
//! Everything downstream (world model, baselines) is built from these pieces:
//! [`Tensor2`] row-major matrices, [`MlpParams`] fully-connected networks with
//! analytic backprop, [`AdamState`] with bias correction and decoupled weight
//! decay, softmax cross-entropy, two-hot scalar coding over [`ValueBins`], and
//! a batched reverse-mode [`tape`] used by the composite training losses.
//!
//! All operations are bit-deterministic given identical inputs; weight
//! initialization draws from a caller-provided seeded RNG.

mod adam;
mod loss;
mod mlp;
pub mod tape;
mod tensor;
mod twohot;

pub use adam::{AdamHyper, AdamState};
pub use loss::{softmax, softmax_cross_entropy};
pub use mlp::{Activation, LayerParams, MlpCache, MlpGrads, MlpParams};
pub(crate) use mlp::softmax_in_place;
pub use tensor::Tensor2;
pub use twohot::ValueBins;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("non-finite gradient in {context}")]
    NonFiniteGradient { context: String },
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },
    #[error("invalid probability target: {reason}")]
    InvalidTarget { reason: String },
}
