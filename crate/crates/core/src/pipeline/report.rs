//! JSON reports. Field order follows the struct definitions and maps are
//! ordered, so identical runs produce identical bytes.

use super::{PipelineError, VERSION};
use crate::alignment::RigidAlignment;
use crate::attitude::RotationMethod;
use crate::geometry::rotation_to_quaternion_wxyz;
use serde::Serialize;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize)]
struct Envelope<'a, T: Serialize> {
    version: &'a str,
    command: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

pub fn to_json<T: Serialize>(command: &str, body: &T) -> String {
    let env = Envelope {
        version: VERSION,
        command,
        body,
    };
    let mut s = serde_json::to_string_pretty(&env).expect("report serialises");
    s.push('\n');
    s
}

pub fn write_report<T: Serialize>(
    path: &Path,
    command: &str,
    body: &T,
) -> Result<(), PipelineError> {
    std::fs::write(path, to_json(command, body)).map_err(|source| {
        super::IoError::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct FixTally {
    pub fixed: usize,
    pub float: usize,
    pub no_rtk: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FixCounts {
    pub antenna1: FixTally,
    pub antenna2: FixTally,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetSource {
    Estimated,
    Configured,
    Disabled,
    Failed,
}

/// Clock offset of a stream relative to GNSS antenna 1; subtract it from
/// the stream's timestamps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OffsetEntry {
    pub seconds: f64,
    pub source: OffsetSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub peak_correlation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl OffsetEntry {
    pub fn estimated(seconds: f64, peak: f64) -> Self {
        Self {
            seconds,
            source: OffsetSource::Estimated,
            peak_correlation: Some(peak),
            error: None,
        }
    }

    pub fn fixed(seconds: f64, source: OffsetSource) -> Self {
        Self {
            seconds,
            source,
            peak_correlation: None,
            error: None,
        }
    }

    pub fn failed(message: String) -> Self {
        Self {
            seconds: 0.0,
            source: OffsetSource::Failed,
            peak_correlation: None,
            error: Some(message),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeOffsets {
    pub gnss2: OffsetEntry,
    pub mag: OffsetEntry,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub imu: Option<OffsetEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualStats {
    pub count: usize,
    pub mean: f64,
    pub rms: f64,
    pub max: f64,
}

impl ResidualStats {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                count: 0,
                mean: 0.0,
                rms: 0.0,
                max: 0.0,
            };
        }
        Self {
            count: n,
            mean: values.iter().sum::<f64>() / n as f64,
            rms: (values.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt(),
            max: values.iter().cloned().fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedEpoch {
    pub t: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentSummary {
    /// Maps the secondary frame into the reference frame.
    pub rotation_wxyz: [f64; 4],
    pub translation: [f64; 3],
    pub rms_residual: f64,
    pub pairs: usize,
}

impl From<&RigidAlignment> for AlignmentSummary {
    fn from(a: &RigidAlignment) -> Self {
        Self {
            rotation_wxyz: rotation_to_quaternion_wxyz(&a.rotation),
            translation: a.translation.into(),
            rms_residual: a.rms_residual,
            pairs: a.pairs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarkerSegmentReport {
    pub images: usize,
    pub poses: usize,
    pub alignment: AlignmentSummary,
    pub stitched_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochCounts {
    pub gnss1: usize,
    pub solved: usize,
    pub skipped: usize,
}

/// Summary of a ground-truth run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub epochs: EpochCounts,
    pub fix_counts: FixCounts,
    pub time_offsets: TimeOffsets,
    pub method: RotationMethod,
    pub alpha: f64,
    /// Triad residual norm per solved epoch.
    pub residuals: ResidualStats,
    pub skipped_epochs: Vec<SkippedEpoch>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub markers: Option<MarkerSegmentReport>,
}
