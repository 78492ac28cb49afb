//! TOML configuration. Every key has a default and unknown keys are
//! rejected. Either table headers (`[attitude]` + `alpha = 50`) or dotted
//! keys (`attitude.alpha = 50`) may be used.

use super::PipelineError;
use crate::alignment::TimeWindow;
use crate::attitude::{
    AntennaCalibration, RotationMethod, WorldMagneticModel, DEFAULT_ALPHA, DEFAULT_MIN_BASELINE,
};
use crate::geometry::{
    quaternion_wxyz_to_rotation, rotation_to_quaternion_wxyz, RotationMatrix, Vec3,
};
use crate::magcal::EllipsoidCalibration;
use crate::markers::{DEFAULT_N_PATHS, DEFAULT_PATH_SLACK};
use crate::timesync::DEFAULT_MAX_LAG;
use crate::vibration::{ResonanceModel, RpmCalibration, DEFAULT_MIN_PEAK_FREQ, DEFAULT_OVERLAP};
use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub general: GeneralConfig,
    pub data: DataConfig,
    pub antenna: AntennaConfig,
    pub magnetic: MagneticConfig,
    pub magcal: MagCalConfig,
    pub attitude: AttitudeConfig,
    pub gnss: GnssConfig,
    pub timesync: TimeSyncConfig,
    pub markers: MarkerConfig,
    pub alignment: AlignmentConfig,
    pub vibration: VibrationConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneralConfig {
    pub seed: u64,
}

/// Input files, relative to the directory of the configuration file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub gnss1: Option<PathBuf>,
    pub gnss2: Option<PathBuf>,
    pub mag: Option<PathBuf>,
    pub imu: Option<PathBuf>,
    pub markers: Option<PathBuf>,
    pub marker_calibration: Option<PathBuf>,
    pub motor_rates: Option<PathBuf>,
    pub rpm_table: Option<PathBuf>,
    /// Reference and secondary pose series for `align`.
    pub trajectory_a: Option<PathBuf>,
    pub trajectory_b: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AntennaConfig {
    /// Antenna positions in the IMU frame, metres.
    pub p_i_g1: [f64; 3],
    pub p_i_g2: [f64; 3],
    /// Virtual-GNSS-to-IMU rotation as a `w, x, y, z` quaternion.
    pub r_vg_i_wxyz: [f64; 4],
}

impl Default for AntennaConfig {
    fn default() -> Self {
        let cal = crate::synthetic::reference_antennas();
        Self {
            p_i_g1: cal.p_i_g1.into(),
            p_i_g2: cal.p_i_g2.into(),
            r_vg_i_wxyz: rotation_to_quaternion_wxyz(&cal.r_vg_i),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MagneticConfig {
    pub declination_deg: f64,
    pub inclination_deg: f64,
    pub field_strength_nt: f64,
}

impl Default for MagneticConfig {
    fn default() -> Self {
        let m = WorldMagneticModel::klagenfurt();
        Self {
            declination_deg: m.declination.to_degrees(),
            inclination_deg: m.inclination.to_degrees(),
            field_strength_nt: m.field_strength_nt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MagCalConfig {
    /// Hard-iron offset in raw sensor units.
    pub offset: [f64; 3],
    /// Soft-iron correction, row-major.
    pub transform: [[f64; 3]; 3],
    /// Magnetometer-to-IMU rotation as a `w, x, y, z` quaternion.
    pub r_i_m_wxyz: [f64; 4],
    /// Static-window detection for extrinsic calibration.
    pub gyro_threshold: f64,
    pub min_static_duration: f64,
}

impl Default for MagCalConfig {
    fn default() -> Self {
        Self {
            offset: [0.0; 3],
            transform: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            r_i_m_wxyz: [1.0, 0.0, 0.0, 0.0],
            gyro_threshold: 0.02,
            min_static_duration: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttitudeConfig {
    pub method: RotationMethod,
    pub alpha: f64,
    pub min_baseline: f64,
}

impl Default for AttitudeConfig {
    fn default() -> Self {
        Self {
            method: RotationMethod::WahbaSvd,
            alpha: DEFAULT_ALPHA,
            min_baseline: DEFAULT_MIN_BASELINE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GnssConfig {
    pub accept_float: bool,
    pub accept_no_rtk: bool,
    /// Largest gap bridged when interpolating antenna 2 or the magnetometer
    /// onto antenna 1 epochs, seconds.
    pub max_interp_gap: f64,
}

impl Default for GnssConfig {
    fn default() -> Self {
        Self {
            accept_float: true,
            accept_no_rtk: false,
            max_interp_gap: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeSyncConfig {
    pub enabled: bool,
    pub max_lag: f64,
    /// Refine correlation offsets with signal-domain least squares.
    pub refine: bool,
    /// Fixed offsets that replace the estimated ones, seconds.
    pub gnss2_offset: Option<f64>,
    pub mag_offset: Option<f64>,
    pub imu_offset: Option<f64>,
}

impl Default for TimeSyncConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            max_lag: DEFAULT_MAX_LAG,
            refine: true,
            gnss2_offset: None,
            mag_offset: None,
            imu_offset: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarkerConfig {
    /// Defaults to the marker with the most co-visible neighbours.
    pub main_marker: Option<u32>,
    pub n_paths: usize,
    pub path_slack: usize,
    /// Camera pose in the IMU frame, `T_I_C`.
    pub p_i_c: [f64; 3],
    pub r_i_c_wxyz: [f64; 4],
}

impl Default for MarkerConfig {
    fn default() -> Self {
        Self {
            main_marker: None,
            n_paths: DEFAULT_N_PATHS,
            path_slack: DEFAULT_PATH_SLACK,
            p_i_c: [0.0; 3],
            r_i_c_wxyz: [1.0, 0.0, 0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentConfig {
    pub max_gap: f64,
    pub windows: Vec<TimeWindow>,
    /// Precedence of the reference and secondary series when stitching.
    pub priority_a: u8,
    pub priority_b: u8,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            max_gap: crate::alignment::DEFAULT_MAX_GAP,
            windows: Vec::new(),
            priority_a: crate::alignment::priority::GNSS,
            priority_b: crate::alignment::priority::MARKER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VibrationConfig {
    /// Samples per Welch segment; defaults to two seconds of data.
    pub window_len: Option<usize>,
    pub overlap: f64,
    pub min_freq: f64,
    pub allan_taus: usize,
    pub rpm: RpmCalibration,
    pub resonance: ResonanceModel,
}

impl Default for VibrationConfig {
    fn default() -> Self {
        Self {
            window_len: None,
            overlap: DEFAULT_OVERLAP,
            min_freq: DEFAULT_MIN_PEAK_FREQ,
            allan_taus: 30,
            rpm: RpmCalibration::PUBLISHED,
            resonance: ResonanceModel::PUBLISHED,
        }
    }
}

fn unit_quaternion(q: [f64; 4], key: &str) -> Result<RotationMatrix, PipelineError> {
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !((n - 1.0).abs() < 1e-6) {
        return Err(PipelineError::Config(format!(
            "{key} must be a unit quaternion, norm is {n}"
        )));
    }
    Ok(quaternion_wxyz_to_rotation(q))
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a configuration and resolves data paths against its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.resolve(base);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |m: &str| Err(PipelineError::Config(m.to_string()));
        self.antennas()?;
        self.mag_intrinsics()?;
        self.r_i_m()?;
        self.t_i_c()?;
        if !(self.attitude.alpha > 0.0) {
            return fail("attitude.alpha must be positive");
        }
        if !(self.timesync.max_lag > 0.0) {
            return fail("timesync.max_lag must be positive");
        }
        if !(self.gnss.max_interp_gap > 0.0) {
            return fail("gnss.max_interp_gap must be positive");
        }
        if self.markers.n_paths == 0 {
            return fail("markers.n_paths must be at least 1");
        }
        if !(0.0..1.0).contains(&self.vibration.overlap) {
            return fail("vibration.overlap must be in [0, 1)");
        }
        if self.alignment.windows.iter().any(|w| !(w.end > w.start)) {
            return fail("alignment.windows must have end > start");
        }
        Ok(())
    }

    pub fn antennas(&self) -> Result<AntennaCalibration, PipelineError> {
        let r = unit_quaternion(self.antenna.r_vg_i_wxyz, "antenna.r_vg_i_wxyz")?;
        AntennaCalibration::new(
            Vec3::from(self.antenna.p_i_g1),
            Vec3::from(self.antenna.p_i_g2),
            r,
        )
        .map_err(|e| PipelineError::Config(format!("antenna: {e}")))
    }

    pub fn magnetic_model(&self) -> WorldMagneticModel {
        WorldMagneticModel {
            declination: self.magnetic.declination_deg.to_radians(),
            inclination: self.magnetic.inclination_deg.to_radians(),
            field_strength_nt: self.magnetic.field_strength_nt,
        }
    }

    pub fn mag_intrinsics(&self) -> Result<EllipsoidCalibration, PipelineError> {
        let t = self.magcal.transform;
        let transform = Matrix3::from_fn(|r, c| t[r][c]);
        if !(transform.determinant().abs() > 1e-12) {
            return Err(PipelineError::Config("magcal.transform is singular".into()));
        }
        Ok(EllipsoidCalibration {
            offset: Vec3::from(self.magcal.offset),
            transform,
        })
    }

    pub fn set_mag_intrinsics(&mut self, cal: &EllipsoidCalibration) {
        self.magcal.offset = cal.offset.into();
        self.magcal.transform =
            std::array::from_fn(|r| std::array::from_fn(|c| cal.transform[(r, c)]));
    }

    pub fn r_i_m(&self) -> Result<RotationMatrix, PipelineError> {
        unit_quaternion(self.magcal.r_i_m_wxyz, "magcal.r_i_m_wxyz")
    }

    pub fn t_i_c(&self) -> Result<crate::geometry::Pose, PipelineError> {
        Ok(crate::geometry::Pose::new(
            unit_quaternion(self.markers.r_i_c_wxyz, "markers.r_i_c_wxyz")?,
            Vec3::from(self.markers.p_i_c),
        ))
    }
}

impl DataConfig {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.gnss1,
            &mut self.gnss2,
            &mut self.mag,
            &mut self.imu,
            &mut self.markers,
            &mut self.marker_calibration,
            &mut self.motor_rates,
            &mut self.rpm_table,
            &mut self.trajectory_a,
            &mut self.trajectory_b,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}
