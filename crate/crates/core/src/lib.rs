pub mod cli;
pub mod config;
pub mod error;
pub mod estimators;
pub mod frame;
pub mod generator;
pub mod geometry;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod motionfield;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use error::{KpbeError, Result};
