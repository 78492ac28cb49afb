//! One function per CLI subcommand. Each reads its inputs from the paths in
//! the configuration and writes its outputs into `out`.

use super::config::PipelineConfig;
use super::io::{self, CsvWriter};
use super::report::{write_report, AlignmentSummary, ResidualStats};
use super::run::{run_ground_truth_with_markers, GroundTruth};
use super::{Dataset, PipelineError};
use crate::alignment::{align_segments, max_step, stitch_trajectory, AlignmentOptions, Segment};
use crate::geometry::{rotation_to_quaternion_wxyz, TimeSeries, Timestamped, Vec3};
use crate::magcal::{build_static_set, detect_static_windows, estimate_extrinsics, fit_ellipsoid};
use crate::markers::{
    calibrate_field, extract_pairwise, CalibrationOptions, MarkerFieldCalibration, MarkerId,
};
use crate::sensors::ImuSample;
use crate::timesync::shift_series;
use crate::vibration::{
    allan_deviation, default_window_len, find_main_peak, fit_rate_to_rpm, log_log_slope,
    log_spaced_taus, predict_resonances, predict_rpm, spectrogram, welch_psd, UniformSignal,
};
use log::{info, warn};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, PipelineError> {
    p.as_deref()
        .ok_or_else(|| PipelineError::Config(format!("data.{key} is not set")))
}

fn out_file(out: &Path, name: &str) -> Result<PathBuf, PipelineError> {
    std::fs::create_dir_all(out).map_err(|source| io::IoError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    Ok(out.join(name))
}

fn optional<T>(
    p: &Option<PathBuf>,
    load: impl Fn(&Path) -> Result<T, io::IoError>,
) -> Result<Option<T>, PipelineError> {
    Ok(p.as_deref().map(load).transpose()?)
}

/// Loads whichever dataset streams the configuration names.
pub fn load_dataset(cfg: &PipelineConfig) -> Result<Dataset, PipelineError> {
    let d = &cfg.data;
    Ok(Dataset {
        gnss1: optional(&d.gnss1, io::load_gnss)?.unwrap_or_default(),
        gnss2: optional(&d.gnss2, io::load_gnss)?.unwrap_or_default(),
        mag: optional(&d.mag, io::load_mag)?.unwrap_or_default(),
        imu: optional(&d.imu, io::load_imu)?.unwrap_or_default(),
        markers: optional(&d.markers, io::load_markers)?.unwrap_or_default(),
        motor_rates: optional(&d.motor_rates, io::load_motor_rates)?.unwrap_or_default(),
    })
}

fn ground_truth(cfg: &PipelineConfig) -> Result<GroundTruth, PipelineError> {
    for (key, p) in [
        ("gnss1", &cfg.data.gnss1),
        ("gnss2", &cfg.data.gnss2),
        ("mag", &cfg.data.mag),
    ] {
        required(p, key)?;
    }
    let ds = load_dataset(cfg)?;
    let field = optional(&cfg.data.marker_calibration, io::load_marker_calibration)?.map(|poses| {
        let main = poses
            .iter()
            .find(|(_, p)| {
                p.translation.norm() == 0.0 && p.rotation == crate::RotationMatrix::identity()
            })
            .map_or(0, |(id, _)| *id);
        MarkerFieldCalibration {
            main_marker: main,
            poses,
        }
    });
    run_ground_truth_with_markers(&ds, cfg, field.as_ref())
}

/// `gt solve`: trajectory.csv and report.json.
pub fn solve(cfg: &PipelineConfig, out: &Path) -> Result<(), PipelineError> {
    let gt = ground_truth(cfg)?;
    io::write_poses(&out_file(out, "trajectory.csv")?, &gt.trajectory)?;
    write_report(&out_file(out, "report.json")?, "solve", &gt.report)
}

/// `gt timesync`: offsets plus the shifted secondary streams.
pub fn timesync(cfg: &PipelineConfig, out: &Path) -> Result<(), PipelineError> {
    let gt = ground_truth(cfg)?;
    let ds = load_dataset(cfg)?;
    let offsets = &gt.report.time_offsets;
    io::write_gnss(
        &out_file(out, "gnss2_synced.csv")?,
        &shift_series(&ds.gnss2, offsets.gnss2.seconds),
    )?;
    io::write_mag(
        &out_file(out, "mag_synced.csv")?,
        &shift_series(&ds.mag, offsets.mag.seconds),
    )?;
    if let Some(imu) = &offsets.imu {
        io::write_imu(
            &out_file(out, "imu_synced.csv")?,
            &shift_series(&ds.imu, imu.seconds),
        )?;
    }
    write_report(&out_file(out, "timesync.json")?, "timesync", offsets)
}

#[derive(Serialize)]
struct AlignReport {
    alignment: AlignmentSummary,
    samples_a: usize,
    samples_b: usize,
    stitched_samples: usize,
    max_step: f64,
}

/// `gt align`: maps trajectory b into the frame of trajectory a and stitches.
pub fn align(cfg: &PipelineConfig, out: &Path) -> Result<(), PipelineError> {
    let a = io::load_poses(required(&cfg.data.trajectory_a, "trajectory_a")?)?;
    let b = io::load_poses(required(&cfg.data.trajectory_b, "trajectory_b")?)?;
    let options = AlignmentOptions {
        windows: cfg.alignment.windows.clone(),
        max_gap: cfg.alignment.max_gap,
        outdoor_weights: None,
    };
    let alignment =
        align_segments(&a, &b, &options).map_err(|e| PipelineError::data("alignment", e))?;
    let aligned: TimeSeries<_> = b
        .iter()
        .map(|s| Timestamped::new(s.t, alignment.apply(&s.value)))
        .collect();
    let stitched = stitch_trajectory(
        &[
            Segment {
                poses: a.clone(),
                priority: cfg.alignment.priority_a,
            },
            Segment {
                poses: b.clone(),
                priority: cfg.alignment.priority_b,
            },
        ],
        &[alignment],
    )
    .map_err(|e| PipelineError::data("stitching", e))?;
    io::write_poses(&out_file(out, "aligned_b.csv")?, &aligned)?;
    io::write_poses(&out_file(out, "stitched.csv")?, &stitched)?;
    let report = AlignReport {
        alignment: AlignmentSummary::from(&alignment),
        samples_a: a.len(),
        samples_b: b.len(),
        stitched_samples: stitched.len(),
        max_step: max_step(&stitched),
    };
    write_report(&out_file(out, "alignment.json")?, "align", &report)
}

fn norm_cv(v: &[Vec3]) -> f64 {
    let norms: Vec<f64> = v.iter().map(|x| x.norm()).collect();
    let n = norms.len() as f64;
    let mean = norms.iter().sum::<f64>() / n;
    let var = norms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

#[derive(Serialize)]
struct IntrinsicReport {
    samples: usize,
    offset: [f64; 3],
    /// Row-major.
    transform: [[f64; 3]; 3],
    norm_cv_raw: f64,
    norm_cv_corrected: f64,
}

/// `gt magcal intrinsic`: ellipsoid fit of the magnetometer stream.
pub fn magcal_intrinsic(cfg: &PipelineConfig, out: &Path) -> Result<(), PipelineError> {
    let mag = io::load_mag(required(&cfg.data.mag, "mag")?)?;
    let raw: Vec<Vec3> = mag.iter().map(|s| s.value).collect();
    let cal = fit_ellipsoid(&raw).map_err(|e| PipelineError::data("ellipsoid fit", e))?;
    let corrected: Vec<Vec3> = raw.iter().map(|m| cal.correct(m)).collect();
    let report = IntrinsicReport {
        samples: raw.len(),
        offset: cal.offset.into(),
        transform: std::array::from_fn(|r| std::array::from_fn(|c| cal.transform[(r, c)])),
        norm_cv_raw: norm_cv(&raw),
        norm_cv_corrected: norm_cv(&corrected),
    };
    write_report(
        &out_file(out, "magcal_intrinsic.json")?,
        "magcal intrinsic",
        &report,
    )
}

#[derive(Serialize)]
struct ExtrinsicReport {
    r_i_m_wxyz: [f64; 4],
    inclination_deg: f64,
    rms_residual: f64,
    static_windows: Vec<[f64; 2]>,
}

/// `gt magcal extrinsic`: magnetometer-to-IMU rotation from static poses.
pub fn magcal_extrinsic(cfg: &PipelineConfig, out: &Path) -> Result<(), PipelineError> {
    let imu: TimeSeries<ImuSample> = io::load_imu(required(&cfg.data.imu, "imu")?)?;
    let mag = io::load_mag(required(&cfg.data.mag, "mag")?)?;
    let windows = detect_static_windows(
        &imu,
        cfg.magcal.gyro_threshold,
        cfg.magcal.min_static_duration,
    );
    info!("{} static windows", windows.len());
    let set = build_static_set(&imu, &mag, &cfg.mag_intrinsics()?, &windows)
        .map_err(|e| PipelineError::data("static poses", e))?;
    let ext = estimate_extrinsics(&set).map_err(|e| PipelineError::data("extrinsic fit", e))?;
    let report = ExtrinsicReport {
        r_i_m_wxyz: rotation_to_quaternion_wxyz(&ext.r_i_m),
        inclination_deg: ext.inclination.to_degrees(),
        rms_residual: ext.rms_residual,
        static_windows: windows.iter().map(|(a, b)| [*a, *b]).collect(),
    };
    write_report(
        &out_file(out, "magcal_extrinsic.json")?,
        "magcal extrinsic",
        &report,
    )
}

#[derive(Serialize)]
struct PairSummary {
    i: MarkerId,
    j: MarkerId,
    samples: usize,
    kept: usize,
    all_rejected: bool,
}

#[derive(Serialize)]
struct MarkerCalReport {
    main_marker: MarkerId,
    markers: usize,
    disconnected: Vec<MarkerId>,
    paths_used: BTreeMap<MarkerId, usize>,
    pairs: Vec<PairSummary>,
}

/// `gt markercal`: marker field calibration from detections.
pub fn markercal(cfg: &PipelineConfig, out: &Path) -> Result<(), PipelineError> {
    let det = io::load_markers(required(&cfg.data.markers, "markers")?)?;
    let obs: Vec<_> = det.iter().map(|d| d.value).collect();
    let pairs =
        extract_pairwise(&obs).map_err(|e| PipelineError::data("pairwise transforms", e))?;
    let main = match cfg.markers.main_marker {
        Some(m) => m,
        None => {
            let mut degree: BTreeMap<MarkerId, usize> = BTreeMap::new();
            for p in &pairs {
                *degree.entry(p.i).or_default() += 1;
                *degree.entry(p.j).or_default() += 1;
            }
            degree
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(id, _)| *id)
                .ok_or_else(|| {
                    PipelineError::data("marker calibration", "no co-visible marker pairs")
                })?
        }
    };
    let options = CalibrationOptions {
        n_paths: cfg.markers.n_paths,
        path_slack: cfg.markers.path_slack,
        seed: cfg.general.seed,
    };
    let result = calibrate_field(&pairs, main, &options)
        .map_err(|e| PipelineError::data("marker calibration", e))?;
    for id in &result.disconnected {
        warn!("marker {id} is not connected to main marker {main}");
    }
    io::write_marker_calibration(
        &out_file(out, "marker_calibration.csv")?,
        &result.calibration,
    )?;
    let report = MarkerCalReport {
        main_marker: main,
        markers: result.calibration.poses.len(),
        disconnected: result.disconnected,
        paths_used: result.paths_used,
        pairs: pairs
            .iter()
            .map(|p| PairSummary {
                i: p.i,
                j: p.j,
                samples: p.samples.len(),
                kept: p.mean.kept,
                all_rejected: p.mean.all_rejected,
            })
            .collect(),
    };
    write_report(&out_file(out, "markercal.json")?, "markercal", &report)
}

/// Mean sample rate of a series, assuming uniform sampling.
fn sample_rate<T>(series: &[Timestamped<T>]) -> Result<f64, PipelineError> {
    match (series.first(), series.last()) {
        (Some(a), Some(b)) if series.len() >= 2 && b.t > a.t => {
            Ok((series.len() - 1) as f64 / (b.t - a.t))
        }
        _ => Err(PipelineError::data(
            "vibration",
            "need at least two samples",
        )),
    }
}

fn accel_norm_signal(imu: &[Timestamped<ImuSample>]) -> Result<UniformSignal, PipelineError> {
    UniformSignal::new(
        sample_rate(imu)?,
        imu.iter().map(|s| s.value.accel.norm()).collect(),
    )
    .map_err(|e| PipelineError::data("vibration", e))
}

#[derive(Serialize)]
struct PsdReport {
    sample_rate: f64,
    window_len: usize,
    overlap: f64,
    segments: usize,
    total_power: f64,
    main_peak_hz: Option<f64>,
}

/// `gt vibration psd`: Welch PSD and spectrogram of the acceleration norm.
pub fn vibration_psd(cfg: &PipelineConfig, out: &Path) -> Result<(), PipelineError> {
    let imu = io::load_imu(required(&cfg.data.imu, "imu")?)?;
    let sig = accel_norm_signal(&imu)?;
    let v = &cfg.vibration;
    let wl = v
        .window_len
        .unwrap_or_else(|| default_window_len(sig.sample_rate()));
    let psd = welch_psd(&sig, wl, v.overlap).map_err(|e| PipelineError::data("psd", e))?;
    let sg = spectrogram(&sig, wl, v.overlap).map_err(|e| PipelineError::data("spectrogram", e))?;
    let peak = match find_main_peak(&psd, v.min_freq) {
        Ok(f) => Some(f),
        Err(e) => {
            warn!("{e}");
            None
        }
    };

    let mut w = CsvWriter::create(&out_file(out, "psd.csv")?, &["freq_hz", "power"])?;
    for (f, p) in psd.freqs.iter().zip(&psd.power) {
        w.row(&[f, p])?;
    }
    w.finish()?;
    let mut w = CsvWriter::create(
        &out_file(out, "spectrogram.csv")?,
        &["t_s", "freq_hz", "power"],
    )?;
    let t0 = imu[0].t;
    for (t, seg) in sg.times.iter().zip(&sg.power) {
        for (f, p) in sg.freqs.iter().zip(seg) {
            w.row(&[t0 + t, *f, *p])?;
        }
    }
    w.finish()?;
    let report = PsdReport {
        sample_rate: sig.sample_rate(),
        window_len: wl,
        overlap: v.overlap,
        segments: sg.power.len(),
        total_power: psd.total_power(),
        main_peak_hz: peak,
    };
    write_report(
        &out_file(out, "vibration_psd.json")?,
        "vibration psd",
        &report,
    )
}

#[derive(Serialize)]
struct RpmRow {
    rate: f64,
    rpm: f64,
    predicted: f64,
    relative_error: f64,
}

#[derive(Serialize)]
struct RpmFitReport {
    a0: f64,
    a1: f64,
    a2: f64,
    rows: Vec<RpmRow>,
    max_relative_error: f64,
}

/// `gt vibration rpmfit`: quadratic rate-to-RPM calibration.
pub fn vibration_rpmfit(cfg: &PipelineConfig, out: &Path) -> Result<(), PipelineError> {
    let table = io::load_rpm_table(required(&cfg.data.rpm_table, "rpm_table")?)?;
    let cal = fit_rate_to_rpm(&table).map_err(|e| PipelineError::data("rpm fit", e))?;
    let rows: Vec<RpmRow> = table
        .iter()
        .map(|&(rate, rpm)| {
            let predicted = predict_rpm(&cal, rate);
            RpmRow {
                rate,
                rpm,
                predicted,
                relative_error: (predicted - rpm) / rpm,
            }
        })
        .collect();
    let report = RpmFitReport {
        a0: cal.a0,
        a1: cal.a1,
        a2: cal.a2,
        max_relative_error: rows
            .iter()
            .map(|r| r.relative_error.abs())
            .fold(0.0, f64::max),
        rows,
    };
    write_report(
        &out_file(out, "rpm_calibration.json")?,
        "vibration rpmfit",
        &report,
    )
}

/// `gt vibration predict`: expected resonance per motor over time.
pub fn vibration_predict(cfg: &PipelineConfig, out: &Path) -> Result<(), PipelineError> {
    let rates = io::load_motor_rates(required(&cfg.data.motor_rates, "motor_rates")?)?;
    let freqs = predict_resonances(&cfg.vibration.resonance, &cfg.vibration.rpm, &rates);
    io::write_quad_series(
        &out_file(out, "resonances.csv")?,
        &["t_s", "f1_hz", "f2_hz", "f3_hz", "f4_hz"],
        &freqs,
    )?;
    let all: Vec<f64> = freqs.iter().flat_map(|s| s.value).collect();
    #[derive(Serialize)]
    struct PredictReport {
        samples: usize,
        rpm: crate::vibration::RpmCalibration,
        resonance: crate::vibration::ResonanceModel,
        min_hz: f64,
        max_hz: f64,
    }
    let report = PredictReport {
        samples: freqs.len(),
        rpm: cfg.vibration.rpm,
        resonance: cfg.vibration.resonance,
        min_hz: all.iter().cloned().fold(f64::INFINITY, f64::min),
        max_hz: all.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    };
    write_report(
        &out_file(out, "resonances.json")?,
        "vibration predict",
        &report,
    )
}

/// `gt vibration allan`: overlapping Allan deviation of all six IMU axes.
pub fn vibration_allan(cfg: &PipelineConfig, out: &Path) -> Result<(), PipelineError> {
    let imu = io::load_imu(required(&cfg.data.imu, "imu")?)?;
    let fs = sample_rate(&imu)?;
    let channels: Vec<Vec<f64>> = (0..6)
        .map(|c| {
            imu.iter()
                .map(|s| {
                    if c < 3 {
                        s.value.gyro[c]
                    } else {
                        s.value.accel[c - 3]
                    }
                })
                .collect()
        })
        .collect();
    let names = ["gx", "gy", "gz", "ax", "ay", "az"];
    let mut curves = Vec::new();
    for ch in channels {
        let sig = UniformSignal::new(fs, ch).map_err(|e| PipelineError::data("allan", e))?;
        let taus = log_spaced_taus(&sig, cfg.vibration.allan_taus);
        curves.push(allan_deviation(&sig, &taus).map_err(|e| PipelineError::data("allan", e))?);
    }
    let mut header = vec!["tau_s"];
    header.extend(names);
    let mut w = CsvWriter::create(&out_file(out, "allan.csv")?, &header)?;
    for k in 0..curves[0].len() {
        let mut row = vec![curves[0][k].0];
        row.extend(curves.iter().map(|c| c[k].1));
        w.row(&row)?;
    }
    w.finish()?;
    let slopes: BTreeMap<&str, Option<f64>> = names
        .iter()
        .zip(&curves)
        .map(|(n, c)| (*n, log_log_slope(c)))
        .collect();
    let stats: BTreeMap<&str, ResidualStats> = names
        .iter()
        .zip(&curves)
        .map(|(n, c)| {
            (
                *n,
                ResidualStats::from_values(&c.iter().map(|x| x.1).collect::<Vec<_>>()),
            )
        })
        .collect();
    #[derive(Serialize)]
    struct AllanReport<'a> {
        sample_rate: f64,
        taus: usize,
        log_log_slope: BTreeMap<&'a str, Option<f64>>,
        adev: BTreeMap<&'a str, ResidualStats>,
    }
    let report = AllanReport {
        sample_rate: fs,
        taus: curves[0].len(),
        log_log_slope: slopes,
        adev: stats,
    };
    write_report(&out_file(out, "allan.json")?, "vibration allan", &report)
}
