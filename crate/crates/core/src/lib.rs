//! Produce-price forecasting engine: sparse panel ingestion, low-rank
//! imputation, time quantization, direction classifiers and the forest
//! similarity kernel used for forecast evidence, intervals and regression.

pub mod data;
pub mod error;
pub mod eval;
pub mod impute;
pub mod kernel;
pub mod model;
pub mod panel;
pub mod synthetic;

pub use error::{Error, Result};
