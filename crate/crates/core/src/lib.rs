//! Ordered representations via nested dropout.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense autoencoder engine with truncation masks and backprop.
//! - [`truncation`]: the distribution over truncation indices.
//! - [`trainer`]: the nested dropout objective, unit sweeping, adaptive
//!   regularization and the invariance penalty.
//! - [`pca`]: numerical checks of the linear-autoencoder / PCA equivalence.
//! - [`binarize`]: quantile thresholding of codes into bits.
//! - [`retrieval`]: prefix-tree index over ordered binary codes.
//! - [`compression`]: encode-once, decode-any-prefix reconstruction curves.
//! - [`data`], [`config`], [`experiment`]: datasets, configuration and
//!   end-to-end orchestration used by the command line tool.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod binarize;
pub mod bits;
pub mod compression;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod numerics;
pub mod pca;
pub mod retrieval;
pub mod trainer;
pub mod truncation;
pub(crate) mod util;

pub use binarize::BinarizerModel;
pub use bits::BitCode;
pub use compression::{OrderedCode, Ordering, RateDistortionCurve};
pub use data::Dataset;
pub use error::{Error, Result};
pub use numerics::{Activation, Gradients, LayerSpec, Network, TruncationMask};
pub use pca::PcaDecomposition;
pub use retrieval::{PrefixTrieIndex, RetrievalResult};
pub use trainer::{SweepConfig, SweepState, TrainConfig, Trainer};
pub use truncation::TruncationDistribution;

/// Matrix type used throughout; column-major, `f64`.
pub type Matrix = nalgebra::DMatrix<f64>;
/// Column vector type used throughout.
pub type Vector = nalgebra::DVector<f64>;
