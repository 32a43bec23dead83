//! Sparse 2D temporal adjacent networks for temporal action localization.
//!
//! The pipeline runs from pre-extracted per-clip features to ranked action
//! proposals and class-labeled detections:
//!
//! - [`map`]: 2D temporal map coordinates, sparse candidate sampling,
//!   stacked max-pooling and the compact sub-map layout.
//! - [`nn`]: tensors, differentiable kernels, a small reverse-mode tape and Adam.
//! - [`proposal`]: the overlap-score network, soft IoU labels and training.
//! - [`classifier`]: the independently trained proposal classifier.
//! - [`detection`]: score fusion, map-to-time conversion, NMS and decoding.
//! - [`metrics`]: temporal IoU, AR@AN, AUC and mAP.
//! - [`io`]: file formats, configuration, synthetic data and the dataset loader.
//! - [`cli`]: the `s2dtan` command-line tool.

pub mod classifier;
pub mod cli;
pub mod dataset;
pub mod detection;
pub mod error;
pub mod io;
pub mod map;
pub mod metrics;
pub mod nn;
pub mod proposal;
pub mod train;

pub use error::{Error, Result};
