//! Pose-based infant movement classification with spatio-temporal attention.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod features;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pose_io;
pub mod preprocess;
pub mod synth;
pub mod train;

pub use error::{Result, StamError};
