//! Timing side-channel laboratory for object-detection post-processing.
//!
//! The crate reproduces, on a synthetic detector, how the runtime of greedy
//! non-maximum suppression leaks the number of candidate boxes (and through
//! it, the detector's confidence), and implements the two attacks built on
//! that channel: timing-guided evasion and timing-only dataset inference.
//! Constant-time and random-delay NMS variants are provided as
//! countermeasures, together with the statistics used to quantify leakage.
//!
//! Module map:
//!
//! - [`geometry`]: boxes, detections and IoU.
//! - [`nms`]: instrumented greedy NMS and the countermeasure variants.
//! - [`detector`]: the anchor-scoring detector simulator, scene forge and
//!   leakage amplification by tiling.
//! - [`clock`] / [`noise`]: modeled and wall-clock timing with noise models.
//! - [`measurement`]: neural-runtime calibration, NMS-time estimation and
//!   leakage reports.
//! - [`stats`]: Spearman correlation, OLS, Wilcoxon signed-rank, medians.
//! - [`evasion`]: the evolutionary timing attack and the decision baseline.
//! - [`inference`]: indicator statistics, nearest-mean decision and the
//!   Chernoff/union-bound false-positive analysis.
//! - [`scenes`]: seeded generators for the synthetic scene sets.

pub mod clock;
pub mod detector;
mod error;
pub mod evasion;
pub mod geometry;
pub mod inference;
pub mod measurement;
pub mod nms;
pub mod noise;
pub mod raster;
pub mod scenes;
pub mod seed;
pub mod stats;

pub use error::{Error, Result};
pub use geometry::{BoundingBox, Detection};
pub use raster::Raster;
