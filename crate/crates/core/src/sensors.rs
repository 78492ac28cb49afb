//! Raw sensor sample types shared by the estimators and the file loaders.

use crate::geometry::Vec3;
use serde::{Deserialize, Serialize};

/// Carrier-phase correction state of a GNSS solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GnssFix {
    NoRtk,
    Float,
    Fixed,
}

impl GnssFix {
    pub fn as_str(&self) -> &'static str {
        match self {
            GnssFix::NoRtk => "no_rtk",
            GnssFix::Float => "float",
            GnssFix::Fixed => "fixed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "no_rtk" | "0" => Some(GnssFix::NoRtk),
            "float" | "1" => Some(GnssFix::Float),
            "fixed" | "2" => Some(GnssFix::Fixed),
            _ => None,
        }
    }
}

/// One GNSS epoch in local ENU metres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GnssSample {
    pub position: Vec3,
    pub fix: GnssFix,
    /// Per-axis variance in m².
    pub variance: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    /// rad/s
    pub gyro: Vec3,
    /// m/s²
    pub accel: Vec3,
}
