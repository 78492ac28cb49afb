//! Ground-truth orchestration: fix filtering, time synchronisation,
//! per-epoch pose estimation and optional marker segment stitching.

use super::config::PipelineConfig;
use super::report::{
    AlignmentSummary, CalibrationReport, EpochCounts, FixCounts, FixTally, MarkerSegmentReport,
    OffsetEntry, OffsetSource, ResidualStats, SkippedEpoch, TimeOffsets,
};
use super::{Dataset, PipelineError};
use crate::alignment::{align_segments, priority, stitch_trajectory, AlignmentOptions, Segment};
use crate::attitude::{horizontal_heading, magnetic_yaw, world_mag_vector, EpochSolver};
use crate::geometry::{Pose, RotationMatrix, TimeSeries, Timestamped, Vec3};
use crate::markers::{vehicle_pose_from_markers, MarkerFieldCalibration, MarkerObservation};
use crate::sensors::{GnssFix, GnssSample};
use crate::timesync::{
    refine_gnss_offset, refine_imu_offset, refine_mag_offset, shift_series, sync_gnss_pair,
    sync_imu_to_gt, sync_mag_to_vg, RefinedOffset, SignalTrace, TimeOffset, TimeSyncError,
};
use log::{info, warn};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// IMU poses in the world (ENU) frame.
    pub trajectory: TimeSeries<Pose>,
    pub report: CalibrationReport,
}

fn fix_accepted(fix: GnssFix, cfg: &PipelineConfig) -> bool {
    match fix {
        GnssFix::Fixed => true,
        GnssFix::Float => cfg.gnss.accept_float,
        GnssFix::NoRtk => cfg.gnss.accept_no_rtk,
    }
}

fn tally(series: &[Timestamped<GnssSample>], cfg: &PipelineConfig) -> FixTally {
    let mut t = FixTally::default();
    for s in series {
        match s.value.fix {
            GnssFix::Fixed => t.fixed += 1,
            GnssFix::Float => t.float += 1,
            GnssFix::NoRtk => t.no_rtk += 1,
        }
        if !fix_accepted(s.value.fix, cfg) {
            t.rejected += 1;
        }
    }
    t
}

fn positions(series: &[Timestamped<GnssSample>], cfg: &PipelineConfig) -> TimeSeries<Vec3> {
    series
        .iter()
        .filter(|s| fix_accepted(s.value.fix, cfg))
        .map(|s| Timestamped::new(s.t, s.value.position))
        .collect()
}

/// Linear interpolation between the samples bracketing `t`, provided they
/// are no more than `max_gap` apart.
pub fn interpolate_vec3(series: &[Timestamped<Vec3>], t: f64, max_gap: f64) -> Option<Vec3> {
    let i = series.partition_point(|s| s.t < t);
    if let Some(s) = series.get(i) {
        if s.t == t {
            return Some(s.value);
        }
    }
    let (a, b) = (series.get(i.checked_sub(1)?)?, series.get(i)?);
    if b.t - a.t > max_gap {
        return None;
    }
    let w = (t - a.t) / (b.t - a.t);
    Some(a.value + (b.value - a.value) * w)
}

fn resolve_offset(
    configured: Option<f64>,
    enabled: bool,
    estimate: impl FnOnce() -> Result<TimeOffset, String>,
) -> OffsetEntry {
    if let Some(d) = configured {
        return OffsetEntry::fixed(d, OffsetSource::Configured);
    }
    if !enabled {
        return OffsetEntry::fixed(0.0, OffsetSource::Disabled);
    }
    match estimate() {
        Ok(o) => OffsetEntry::estimated(o.delta, o.peak_correlation),
        Err(e) => OffsetEntry::failed(e),
    }
}

fn require(entry: &OffsetEntry, stream: &'static str) -> Result<f64, PipelineError> {
    match (&entry.source, &entry.error) {
        (OffsetSource::Failed, Some(e)) => Err(PipelineError::data(stream, e)),
        _ => Ok(entry.seconds),
    }
}

/// Span between reference attitudes compared against the gyro integral.
const IMU_REFINE_SPAN: f64 = 0.5;

fn refined(
    stream: &str,
    coarse: TimeOffset,
    fit: Result<RefinedOffset, TimeSyncError>,
) -> TimeOffset {
    match fit {
        Ok(fit) => {
            info!(
                "{stream} offset refined {:.4} -> {:.4} s (±{:.1e} s)",
                coarse.delta, fit.delta, fit.std_error
            );
            TimeOffset {
                delta: fit.delta,
                ..coarse
            }
        }
        Err(e) => {
            warn!("{stream} offset refinement failed ({e}); keeping correlation offset");
            coarse
        }
    }
}

fn trace(t: Vec<f64>, v: Vec<f64>) -> Result<SignalTrace, String> {
    SignalTrace::new(t, v).map_err(|e| e.to_string())
}

/// Time offsets of antenna 2 and the magnetometer relative to antenna 1.
pub fn estimate_offsets(
    g1: &[Timestamped<Vec3>],
    g2: &[Timestamped<Vec3>],
    mag: &[Timestamped<Vec3>],
    cfg: &PipelineConfig,
) -> Result<(OffsetEntry, OffsetEntry), PipelineError> {
    let ts = &cfg.timesync;
    let gnss2 = resolve_offset(ts.gnss2_offset, ts.enabled, || {
        let coarse = sync_gnss_pair(g1, g2, ts.max_lag).map_err(|e| e.to_string())?;
        if !ts.refine {
            return Ok(coarse);
        }
        match refine_gnss_offset(g1, g2, coarse.delta) {
            Ok(fit) => {
                info!(
                    "antenna 2 offset refined {:.4} -> {:.4} s (baseline {:.3} m, ±{:.1e} s)",
                    coarse.delta, fit.delta, fit.baseline, fit.std_error
                );
                Ok(TimeOffset {
                    delta: fit.delta,
                    ..coarse
                })
            }
            Err(e) => {
                warn!("baseline refinement failed ({e}); keeping correlation offset");
                Ok(coarse)
            }
        }
    });
    let g2_shifted = shift_series(g2, require(&gnss2, "antenna 2 time sync")?);

    let intrinsics = cfg.mag_intrinsics()?;
    let r_i_m = cfg.r_i_m()?;
    let mag_entry = resolve_offset(ts.mag_offset, ts.enabled, || {
        let mut baselines = Vec::new();
        let (mut vt, mut vh) = (Vec::new(), Vec::new());
        for a in g1 {
            if let Some(b) = interpolate_vec3(&g2_shifted, a.t, cfg.gnss.max_interp_gap) {
                baselines.push(Timestamped::new(a.t, a.value - b));
                vt.push(a.t);
                vh.push(horizontal_heading(&(a.value - b)));
            }
        }
        let mag_body: Vec<Timestamped<Vec3>> = mag
            .iter()
            .map(|s| Timestamped::new(s.t, r_i_m * intrinsics.correct(&s.value)))
            .collect();
        let (mt, mh) = mag_body
            .iter()
            .map(|s| (s.t, magnetic_yaw(&s.value)))
            .unzip();
        let coarse = sync_mag_to_vg(&trace(vt, vh)?, &trace(mt, mh)?, ts.max_lag)
            .map_err(|e| e.to_string())?;
        if !ts.refine {
            return Ok(coarse);
        }
        let antennas = cfg.antennas().map_err(|e| e.to_string())?;
        let field = world_mag_vector(&cfg.magnetic_model()).into_inner();
        let fit = refine_mag_offset(
            &baselines,
            &(antennas.p_i_g1 - antennas.p_i_g2),
            &field,
            &mag_body,
            coarse.delta,
        );
        Ok(refined("magnetometer", coarse, fit))
    });
    Ok((gnss2, mag_entry))
}

/// Full pipeline without a marker segment.
pub fn run_ground_truth(ds: &Dataset, cfg: &PipelineConfig) -> Result<GroundTruth, PipelineError> {
    run_ground_truth_with_markers(ds, cfg, None)
}

pub fn run_ground_truth_with_markers(
    ds: &Dataset,
    cfg: &PipelineConfig,
    marker_field: Option<&MarkerFieldCalibration>,
) -> Result<GroundTruth, PipelineError> {
    for (name, empty) in [
        ("gnss1", ds.gnss1.is_empty()),
        ("gnss2", ds.gnss2.is_empty()),
        ("mag", ds.mag.is_empty()),
    ] {
        if empty {
            return Err(PipelineError::Config(format!(
                "ground truth needs the {name} stream"
            )));
        }
    }
    if !ds.markers.is_empty() && marker_field.is_none() {
        warn!("marker detections present but no marker calibration given; ignoring them");
    }
    let mut solver = EpochSolver::new(cfg.antennas()?, cfg.magnetic_model());
    solver.mag_intrinsics = cfg.mag_intrinsics()?;
    solver.r_i_m = cfg.r_i_m()?;
    solver.method = cfg.attitude.method;
    solver.alpha = cfg.attitude.alpha;
    solver.min_baseline = cfg.attitude.min_baseline;

    let fix_counts = FixCounts {
        antenna1: tally(&ds.gnss1, cfg),
        antenna2: tally(&ds.gnss2, cfg),
    };
    let g1 = positions(&ds.gnss1, cfg);
    let g2_raw = positions(&ds.gnss2, cfg);

    let (gnss2_offset, mag_offset) = estimate_offsets(&g1, &g2_raw, &ds.mag, cfg)?;
    let g2 = shift_series(&g2_raw, require(&gnss2_offset, "antenna 2 time sync")?);
    let mag = shift_series(&ds.mag, require(&mag_offset, "magnetometer time sync")?);
    info!(
        "antenna 2 offset {:.4} s, magnetometer offset {:.4} s",
        gnss2_offset.seconds, mag_offset.seconds
    );

    let gap = cfg.gnss.max_interp_gap;
    let mut trajectory = Vec::new();
    let mut residuals = Vec::new();
    let mut skipped = Vec::new();
    for s in &ds.gnss1 {
        let t = s.t;
        let outcome = (|| {
            if !fix_accepted(s.value.fix, cfg) {
                return Err(format!("antenna 1 fix {} rejected", s.value.fix.as_str()));
            }
            let p2 = interpolate_vec3(&g2, t, gap).ok_or("no antenna 2 sample within the gap")?;
            let m =
                interpolate_vec3(&mag, t, gap).ok_or("no magnetometer sample within the gap")?;
            solver
                .estimate_pose_epoch(
                    &Timestamped::new(t, s.value.position),
                    &Timestamped::new(t, p2),
                    &m,
                )
                .map_err(|e| e.to_string())
        })();
        match outcome {
            Ok((pose, est)) => {
                trajectory.push(pose);
                residuals.push(est.residual);
            }
            Err(reason) => {
                warn!("epoch {t}: skipped, {reason}");
                skipped.push(SkippedEpoch { t, reason });
            }
        }
    }
    info!(
        "{} epochs solved, {} skipped",
        trajectory.len(),
        skipped.len()
    );

    let imu = if ds.imu.is_empty() {
        None
    } else {
        let ts = &cfg.timesync;
        Some(resolve_offset(ts.imu_offset, ts.enabled, || {
            let rotations: Vec<Timestamped<RotationMatrix>> = trajectory
                .iter()
                .map(|p| Timestamped::new(p.t, p.value.rotation))
                .collect();
            let gyro: Vec<Timestamped<Vec3>> = ds
                .imu
                .iter()
                .map(|s| Timestamped::new(s.t, s.value.gyro))
                .collect();
            let coarse =
                sync_imu_to_gt(&rotations, &gyro, ts.max_lag).map_err(|e| e.to_string())?;
            if !ts.refine {
                return Ok(coarse);
            }
            Ok(refined(
                "IMU",
                coarse,
                refine_imu_offset(&rotations, &gyro, coarse.delta, IMU_REFINE_SPAN),
            ))
        }))
    };
    if let Some(OffsetEntry { error: Some(e), .. }) = &imu {
        warn!("IMU time sync failed: {e}");
    }

    let mut report = CalibrationReport {
        epochs: EpochCounts {
            gnss1: ds.gnss1.len(),
            solved: trajectory.len(),
            skipped: skipped.len(),
        },
        fix_counts,
        time_offsets: TimeOffsets {
            gnss2: gnss2_offset,
            mag: mag_offset,
            imu,
        },
        method: cfg.attitude.method,
        alpha: cfg.attitude.alpha,
        residuals: ResidualStats::from_values(&residuals),
        skipped_epochs: skipped,
        markers: None,
    };

    if let (Some(field), false) = (marker_field, ds.markers.is_empty()) {
        let (marker_poses, images) = marker_trajectory(&ds.markers, field, &cfg.t_i_c()?);
        let options = AlignmentOptions {
            windows: cfg.alignment.windows.clone(),
            max_gap: cfg.alignment.max_gap,
            outdoor_weights: None,
        };
        let alignment = align_segments(&trajectory, &marker_poses, &options)
            .map_err(|e| PipelineError::data("marker alignment", e))?;
        let stitched = stitch_trajectory(
            &[
                Segment {
                    poses: trajectory,
                    priority: priority::GNSS,
                },
                Segment {
                    poses: marker_poses.clone(),
                    priority: priority::MARKER,
                },
            ],
            &[alignment],
        )
        .map_err(|e| PipelineError::data("stitching", e))?;
        report.markers = Some(MarkerSegmentReport {
            images,
            poses: marker_poses.len(),
            alignment: AlignmentSummary::from(&alignment),
            stitched_samples: stitched.len(),
        });
        trajectory = stitched;
    }

    Ok(GroundTruth { trajectory, report })
}

/// IMU poses in the marker-field frame, one per image with at least one
/// calibrated marker. Returns the poses and the number of images seen.
pub fn marker_trajectory(
    detections: &[Timestamped<MarkerObservation>],
    field: &MarkerFieldCalibration,
    t_i_c: &Pose,
) -> (TimeSeries<Pose>, usize) {
    let mut images: BTreeMap<u64, (f64, Vec<MarkerObservation>)> = BTreeMap::new();
    for d in detections {
        images
            .entry(d.value.image_id)
            .or_insert((d.t, Vec::new()))
            .1
            .push(d.value);
    }
    let t_c_i = t_i_c.inverse();
    let mut poses: TimeSeries<Pose> = images
        .values()
        .filter_map(|(t, obs)| {
            vehicle_pose_from_markers(obs, field)
                .ok()
                .map(|cam| Timestamped::new(*t, cam.compose(&t_c_i)))
        })
        .collect();
    poses.sort_by(|a, b| a.t.total_cmp(&b.t));
    poses.dedup_by(|b, a| b.t == a.t);
    (poses, images.len())
}
