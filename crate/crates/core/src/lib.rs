//! Few-shot semantic segmentation with a class-shared memory bank and
//! uncertainty-based feature augmentation.
//!
//! The crate is organised bottom-up:
//!
//! - [`numcore`]: dense arrays, channel statistics, sampling, and the
//!   reverse-mode tape every trainable component is differentiated with.
//! - [`augment`]: batch-level uncertainty of feature statistics and the
//!   statistic-mixing query augmentation (training only).
//! - [`memory`]: the learnable memory bank, softmax re-encoding, and the
//!   masked diagonal reconstruction loss.
//! - [`model`]: encoder, prototypes, decoder, losses, training and inference.
//! - [`data`]: synthetic shape dataset, folds, and episode sampling.
//! - [`eval`]: IoU accumulation, mIoU, and fold cross-validation.
//! - [`ablation`]: controlled comparisons along one configuration axis.

pub mod ablation;
pub mod augment;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod manifest;
pub mod memory;
pub mod model;
pub mod numcore;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use numcore::{ChannelStats, FeatureMap, Rng, Tensor};
