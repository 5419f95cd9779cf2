//! Green-canopy coverage from large aerial GeoTIFF imagery.
//!
//! Pages are cut into zero-padded square chunks, each chunk is labelled by a
//! canopy estimator, and padding-aware pixel counts roll up into per-file and
//! overall coverage reports.

pub mod metrics;
pub mod pipeline;
pub mod segmentation;
pub mod store;
pub mod tiff_reader;
pub mod tiling;
