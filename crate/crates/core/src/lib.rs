//! Joint example selection for multimodal contrastive learning.
//!
//! - [`contrastive`]: sigmoid and softmax contrastive losses, per-pair loss
//!   matrices and analytic gradients.
//! - [`scoring`]: learnability / easy-reference / hard-learner score matrices
//!   and the reference-embedding cache.
//! - [`sampler`]: chunked joint sampling plus baselines and oracles.
//! - [`flops`]: per-example cost model for IID, JEST and Flexi-JEST.
//! - [`trainer`]: a small dual-encoder trainer driven by joint selection.
//! - [`harness`]: synthetic data, experiment configs, runs, CSV and plots.

pub mod contrastive;
mod envelope;
pub mod error;
pub mod flops;
pub mod harness;
pub mod matrix;
pub mod sampler;
pub mod scoring;
pub mod trainer;

pub use contrastive::{
    ContrastiveParams, EmbeddingBatch, Gradients, LossKind, LossMatrix, SigmoidNll, SoftmaxNll,
};
pub use envelope::encoded_len;
pub use error::{Error, Result};
pub use flops::FlopModel;
pub use matrix::Matrix;
pub use sampler::{SelectionConfig, SubBatchSelection};
pub use scoring::{ReferenceCache, ScoreMatrix, ScoringMethod};
