//! Few-shot classification over fixed embeddings by prototype completion.
//!
//! A completion network learns, on base classes, to map an incomplete
//! mean-based prototype plus class–attribute knowledge to the full-class
//! prototype. At test time mean-based and completed prototypes are fused by a
//! product of diagonal Gaussians whose parameters are estimated transductively
//! from the episode's unlabeled queries.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod cli;
pub mod datagen;
pub mod dataset;
pub mod episodes;
pub mod error;
pub mod fusion;
pub mod io;
pub mod knowledge;
pub mod linalg;
pub mod nn;
pub mod protocomnet;

pub use dataset::{ClassId, DatasetSplit, FewShotDataset};
pub use error::{Error, Result};
