//! Multi-dataset, multi-level feature distillation.
//!
//! Individual teachers are trained per dataset, their frozen features are
//! fused into a joint teacher trained on every dataset at once, and one
//! student per dataset is distilled from the joint teacher's class
//! probabilities and intermediate embeddings.

pub mod data;
pub mod distill;
pub mod error;
pub mod fusion;
pub mod models;
pub mod pipeline;
pub mod train;
pub mod util;

pub use error::{Error, ErrorClass, Result};
