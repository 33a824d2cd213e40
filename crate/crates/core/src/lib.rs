//! Granular-ball hierarchical clustering for stable latent pseudo-domain
//! discovery: descriptor statistics, PCA reduction, recursive weighted
//! 2-means ball division, representative K-means with cross-epoch label
//! alignment, disentanglement loss functions, and a synthetic benchmark
//! harness.

pub mod discover;
pub mod error;
pub mod evalsynth;
pub mod featstats;
pub mod gbdivide;
pub mod gbsplit;
pub mod losses;
pub mod pca;

pub use error::{GbError, Result};
