//! Boundary-aware point-cloud semantic segmentation.
//!
//! The crate covers the full pipeline at desk scale: synthetic labeled
//! scenes, exact neighbor search and farthest-point sampling, boundary
//! ground truth and a boundary prediction network, the geometric
//! convolution operator, boundary-masked feature aggregation inside an
//! encoder-decoder, and a manual-gradient training engine with Adam.

pub mod boundary;
pub mod cloud;
pub mod config;
pub mod encode;
pub mod error;
pub mod geoconv;
pub mod knn;
pub mod metrics;
pub mod nn;
pub mod sampling;
pub mod scene;
pub mod train;

pub use cloud::{load_cloud, save_cloud, PointCloud};
pub use error::{Error, Result};
