//! Gaze-following data preparation, response parsing, baseline predictors
//! and evaluation.

pub mod assign;
pub mod cli;
pub mod config;
pub mod error;
pub mod hha;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod predictors;
pub mod prompt;

pub use error::{Error, LineError, Result};
pub use model::{
    AnnotatedSample, Detection, GazePoint, ImageSize, NormBox, PixelBox, Prediction, Task,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
