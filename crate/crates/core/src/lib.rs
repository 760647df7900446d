//! Corrosion detection on high-resolution structure imagery.
//!
//! Images are cut into an `n x n` grid. A segment scorer assigns each
//! segment a corrosion confidence, an object detector supplies the mask of
//! the inspected structure, and a small ensemble classifier fuses the two so
//! that corrosion-like segments away from the structure are suppressed.
//!
//! The crate is organized by pipeline stage:
//!
//! * [`geometry`]: grid tiling, label matrices, polygon rasterization
//! * [`annotation`]: grid and LabelMe annotation ingestion, train/test split
//! * [`ciss`]: balanced segment training-set construction
//! * [`scoring`]: segment scorers, image confidence, external score files
//! * [`detection`]: object masks from files or a color-threshold baseline
//! * [`erc`]: mask/segment fusion features and ensemble classifiers
//! * [`metrics`]: decision thresholds, confusion scores, IoU, AP
//! * [`synth`], [`render`]: synthetic data with exact labels, overlays
//! * [`config`], [`pipeline`], [`report`]: staged runs over a run directory

pub mod annotation;
pub mod ciss;
pub mod config;
pub mod detection;
pub mod erc;
pub mod error;
pub mod geometry;
pub mod learn;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod report;
pub mod scoring;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::{
    BinaryGridMatrix, BoundingBox, ConfidenceGridMatrix, GridSpec, ImageDescriptor, Point,
    PolygonMask, SegmentIndex,
};
