//! Daily batch pipeline, file-backed store and HTTP API for the produce
//! price forecaster.

pub mod api;
pub mod error;
pub mod pipeline;
pub mod records;
pub mod source;
pub mod store;

pub use error::{Result, ServiceError};
