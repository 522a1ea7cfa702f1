pub mod datasets;
pub mod error;
pub mod evalmetrics;
pub mod itemgraph;
pub mod model;
pub mod numcore;
pub mod synthetic;
pub mod trainer;

pub use error::{Result, TmlpError};
