//! Hierarchy-aware label representation learning for imbalanced text
//! classification.
//!
//! The crate is `no_std` (with `alloc`): it carries every numerical piece of
//! the method and no IO. File formats and the command line live in the
//! `text2tree` crate.
//!
//! Pipeline per training step:
//!
//! 1. [`text_encoder`] pools token embeddings into one vector `z` per text.
//! 2. [`hlr`] computes a representation for every node of the [`label_tree`]
//!    with cascade attention over parent and gated siblings.
//! 3. [`label_similarity`] turns label representations into a cosine
//!    similarity matrix between the samples of a batch.
//! 4. [`objectives`] uses that matrix twice: as soft positive weights in the
//!    similarity-surrogate contrastive loss and as mixing weights for
//!    dissimilarity mixup.
//! 5. [`trainer`] combines everything, applies the gradient-detach policy and
//!    takes an AdamW step.
//!
//! Gradients come from the reverse-mode [`tape`]. [`gradcheck`] compares them
//! against central finite differences.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod dataset;
pub mod error;
pub mod fmt;
pub mod generator;
pub mod gradcheck;
pub mod hlr;
pub mod label_similarity;
pub mod label_tree;
pub mod math;
pub mod matrix;
pub mod metrics;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod text_encoder;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
