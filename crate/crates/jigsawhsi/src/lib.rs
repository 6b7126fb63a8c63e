//! JigsawHSI: hyperspectral image pixel classification.
//!
//! The pipeline reads an (H x W x B) hyperspectral cube and a ground-truth
//! label raster, reduces the spectral dimension with one of four matrix
//! decompositions, extracts (S x S x c) tiles centered on labeled pixels,
//! trains a configurable Inception-style network on them, and reports
//! overall accuracy, average accuracy and Cohen's Kappa together with a
//! full-scene classification map.

pub mod config;
pub mod decompose;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod tiler;
pub mod trainer;
