//! User-level membership inference against metric-embedding models.
//!
//! The attack measures how compact a user's samples are in an encoder's
//! latent space. Users whose data trained the encoder form tighter clusters,
//! even for samples that were never seen during training. Two compactness
//! features (mean distance to centroid and mean pairwise distance) are fed to
//! a small classifier trained on shadow encoders with known membership.
//!
//! Module map:
//! - [`nn`]: dense feed-forward networks with exact reverse-mode gradients.
//! - [`dataset`]: user-labelled samples, membership partitions, CSV IO.
//! - [`embedding`]: batch-hard soft-margin triplet training of encoders.
//! - [`features`]: the two cluster-compactness features.
//! - [`shadow`]: shadow encoder training and attack dataset assembly.
//! - [`attack`]: the membership classifier and user-level inference.
//! - [`baseline`]: augmentation-consistency baseline with majority voting.
//! - [`harness`]: experiment grid, metrics and reports.

pub mod attack;
pub mod baseline;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod features;
pub mod harness;
pub mod nn;
pub mod rng;
pub mod shadow;

pub use error::{Error, Result};
