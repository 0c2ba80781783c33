//! Parameter-efficient adaptation toolkit for promptable segmentation models.
//!
//! The crate provides a similarity-graph bottleneck adapter ([`dsga`]) with
//! hand-written gradients, a low-rank weight update ([`lora`]), grid-based
//! point prompt generation and instance deduplication ([`prompt`]), the
//! focal/dice/boundary training objective ([`loss`]), the saliency and
//! instance evaluation metrics ([`metrics`]), and file-level orchestration
//! ([`pipeline`]).
//!
//! Batch-level work runs on rayon when the `parallel` feature (default) is
//! enabled and sequentially otherwise. Results are identical either way.

pub mod error;
pub mod numerics;
pub mod par;

pub use error::{Error, Result};
pub use numerics::{Dtype, Real, Tensor};
pub mod dsga;
pub mod lora;
pub mod prompt;
pub mod loss;
pub mod metrics;
pub mod pipeline;
