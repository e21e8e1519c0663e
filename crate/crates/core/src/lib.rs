//! Region-function guided traffic flow forecasting.
//!
//! The crate covers the whole pipeline: partitioning a road raster into
//! irregular regions, aggregating trajectories into per-region flows,
//! building the POI similarity graph, the POI-conditioned attention block
//! and its host predictors, training and evaluation, and a synthetic city
//! benchmark.

pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod formats;
pub mod gradcheck;
pub mod hosts;
pub mod layers;
pub mod metablock;
pub mod metrics;
pub mod model;
pub mod params;
pub mod partition;
pub mod plot;
pub mod poi;
pub mod synthetic;
pub mod temporal;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
