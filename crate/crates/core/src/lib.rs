//! Language grounding over multi-view object renderings.
//!
//! A frozen vision encoder and a frozen language encoder are paired with a
//! domain encoder: a copy of the vision encoder whose attention projections
//! carry trainable low-rank adapters. Per-view domain features are reweighted
//! by their cosine similarity to the description, max-pooled across views,
//! and fused with the other two embeddings into a per-candidate score.
//! Training combines a grounding loss with a bidirectional contrastive loss
//! and a caption loss under a frozen decoder.

pub mod dataset;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod head;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod training;

pub use error::{Error, Result};
