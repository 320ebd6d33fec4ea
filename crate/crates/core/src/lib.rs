//! Active and incremental learning for grid-cell object detectors, plus
//! Gaussian-process based expected model output change (EMOC) selection.
//!
//! The crate is organised by subsystem:
//!
//! - [`synthdata`]: deterministic synthetic detection scenes and clustered
//!   feature datasets, with on-disk persistence.
//! - [`detector`]: a miniature single-pass grid detector trained by SGD,
//!   with λ-mixed incremental updates and PASCAL-style mAP.
//! - [`metrics`]: margin sampling, detection aggregations and the grid
//!   specific selection metrics.
//! - [`protocol`]: the batch-wise active exploration loop and learning curves.
//! - [`gp`]: one-vs-all GP regression with closed-form updates, EMOC,
//!   density weighting, rejection handling and the discovery harness.

pub mod detector;
pub mod error;
pub mod geometry;
pub mod gp;
pub mod metrics;
pub mod protocol;
pub mod seeds;
pub mod synthdata;

pub use error::{Error, Result};
pub use geometry::BBox;
