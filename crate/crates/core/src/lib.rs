//! Surface NO2 estimation from satellite data: ingestion of Sentinel-2
//! tiles, Sentinel-5P column-density grids and ground-station targets,
//! a dual-stream convolutional regression model with land-cover
//! pretraining, the training/evaluation harness and overlapping-tile
//! heatmap inference.

pub mod container;
pub mod dataset;
pub mod error;
pub mod geo;
pub mod mapping;
pub mod model;
pub mod period;
pub mod raster;
pub mod s2_ingest;
pub mod s5p_ingest;
pub mod stations;
pub mod train_eval;
pub mod nn;
pub mod test_fixtures;

pub use error::{Error, Result};
