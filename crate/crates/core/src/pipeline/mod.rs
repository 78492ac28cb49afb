//! Data ingestion, configuration, orchestration and reports.

pub mod commands;
pub mod config;
pub mod fixtures;
pub mod io;
pub mod report;
pub mod run;

use crate::geometry::{TimeSeries, Vec3};
use crate::markers::MarkerObservation;
use crate::sensors::{GnssSample, ImuSample};
use thiserror::Error;

pub use config::PipelineConfig;
pub use io::IoError;
pub use report::CalibrationReport;
pub use run::{run_ground_truth, GroundTruth};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// All sensor streams of one recording. Streams not needed by a command may
/// be empty.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub gnss1: TimeSeries<GnssSample>,
    pub gnss2: TimeSeries<GnssSample>,
    pub mag: TimeSeries<Vec3>,
    pub imu: TimeSeries<ImuSample>,
    /// Detections ordered by time; all detections of one image share a
    /// timestamp.
    pub markers: TimeSeries<MarkerObservation>,
    pub motor_rates: TimeSeries<[f64; 4]>,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{stage}: {message}")]
    Data {
        stage: &'static str,
        message: String,
    },
}

impl PipelineError {
    pub fn data(stage: &'static str, err: impl std::fmt::Display) -> Self {
        Self::Data {
            stage,
            message: err.to_string(),
        }
    }

    /// Configuration and usage problems as opposed to bad input data.
    pub fn is_config(&self) -> bool {
        matches!(self, Self::Config(_))
    }
}
