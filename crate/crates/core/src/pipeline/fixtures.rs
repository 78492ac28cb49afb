//! Writes a self-contained synthetic fixture set: CSV inputs plus one
//! configuration file per command family.

use super::config::PipelineConfig;
use super::io;
use super::PipelineError;
use crate::geometry::rotation_to_quaternion_wxyz;
use crate::synthetic::{
    magcal_session, three_segment_flight, vibration_session, ForwardModel, MagCalSettings,
    MarkerGrid,
};
use crate::vibration::{predict_rpm, ResonanceModel, RpmCalibration, RPM_TABLE};
use std::path::{Path, PathBuf};

/// Configuration files written by [`write_fixture_set`].
#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSet {
    pub solve: PathBuf,
    pub magcal: PathBuf,
    pub markers: PathBuf,
    pub align: PathBuf,
    pub vibration: PathBuf,
}

fn write_config(dir: &Path, name: &str, cfg: &PipelineConfig) -> Result<PathBuf, PipelineError> {
    let path = dir.join(name);
    std::fs::write(&path, cfg.to_toml()).map_err(|source| io::IoError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

/// Generates all fixtures into `dir`. Flight durations are kept short so the
/// whole set is processed in seconds.
pub fn write_fixture_set(dir: &Path, seed: u64) -> Result<FixtureSet, PipelineError> {
    std::fs::create_dir_all(dir).map_err(|source| io::IoError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let rel = |s: &str| Some(PathBuf::from(s));

    // ground truth flight
    let mut model = ForwardModel::reference(seed);
    model.duration = 60.0;
    let flight = model.generate();
    io::write_gnss(&dir.join("gnss1.csv"), &flight.dataset.gnss1)?;
    io::write_gnss(&dir.join("gnss2.csv"), &flight.dataset.gnss2)?;
    io::write_mag(&dir.join("mag.csv"), &flight.dataset.mag)?;
    io::write_imu(&dir.join("imu.csv"), &flight.dataset.imu)?;
    io::write_poses(&dir.join("truth.csv"), &flight.truth)?;
    let mut solve = PipelineConfig::default();
    solve.general.seed = seed;
    solve.data.gnss1 = rel("gnss1.csv");
    solve.data.gnss2 = rel("gnss2.csv");
    solve.data.mag = rel("mag.csv");
    solve.data.imu = rel("imu.csv");
    solve.set_mag_intrinsics(&model.mag_distortion);
    solve.magcal.r_i_m_wxyz = rotation_to_quaternion_wxyz(&model.r_i_m);
    let solve_path = write_config(dir, "solve.toml", &solve)?;

    // magnetometer calibration session
    let settings = MagCalSettings {
        seed,
        ..MagCalSettings::default()
    };
    let session = magcal_session(&settings);
    io::write_imu(&dir.join("magcal_imu.csv"), &session.imu)?;
    io::write_mag(&dir.join("magcal_mag.csv"), &session.mag)?;
    let mut magcal = PipelineConfig::default();
    magcal.data.imu = rel("magcal_imu.csv");
    magcal.data.mag = rel("magcal_mag.csv");
    magcal.set_mag_intrinsics(&settings.distortion);
    let magcal_path = write_config(dir, "magcal.toml", &magcal)?;

    // marker field
    let grid = MarkerGrid::new(4, 5, 0.5, seed);
    let detections = grid.observe(6, 0.001, 0.0005, 0.1, seed);
    io::write_markers(&dir.join("markers.csv"), &detections)?;
    let mut markers = PipelineConfig::default();
    markers.general.seed = seed;
    markers.data.markers = rel("markers.csv");
    markers.markers.main_marker = Some(grid.central_marker());
    let markers_path = write_config(dir, "markers.toml", &markers)?;

    // two overlapping trajectory segments
    let seg = three_segment_flight(0.02, 0.002, seed);
    io::write_poses(&dir.join("trajectory_a.csv"), &seg.segments[0])?;
    io::write_poses(&dir.join("trajectory_b.csv"), &seg.segments[1])?;
    let mut align = PipelineConfig::default();
    align.data.trajectory_a = rel("trajectory_a.csv");
    align.data.trajectory_b = rel("trajectory_b.csv");
    let align_path = write_config(dir, "align.toml", &align)?;

    // vibration
    let rates = [297.0, 486.0, 864.0, 1242.0];
    let cal = RpmCalibration::PUBLISHED;
    let res = ResonanceModel::PUBLISHED;
    let vib = vibration_session(
        &rates,
        8.0,
        |r| res.frequency(predict_rpm(&cal, r)),
        0.2,
        seed,
    );
    io::write_imu(&dir.join("vibration_imu.csv"), &vib.imu)?;
    io::write_motor_rates(&dir.join("motor_rates.csv"), &vib.motor_rates)?;
    io::write_rpm_table(&dir.join("rpm_table.csv"), &RPM_TABLE)?;
    let mut vibration = PipelineConfig::default();
    vibration.data.imu = rel("vibration_imu.csv");
    vibration.data.motor_rates = rel("motor_rates.csv");
    vibration.data.rpm_table = rel("rpm_table.csv");
    let vibration_path = write_config(dir, "vibration.toml", &vibration)?;

    Ok(FixtureSet {
        solve: solve_path,
        magcal: magcal_path,
        markers: markers_path,
        align: align_path,
        vibration: vibration_path,
    })
}
