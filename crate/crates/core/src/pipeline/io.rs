//! CSV readers and writers.
//!
//! Every file has a header row. Columns are looked up by name, so extra
//! columns and any column order are accepted on input. Writers use the
//! shortest round-trip float formatting, so parsing a written file and
//! writing it again reproduces it byte for byte, except that quaternion
//! columns pass through a rotation matrix and may move in the last bit.

use crate::geometry::{first_non_monotonic, Pose, TimeSeries, Timestamped, Vec3};
use crate::markers::{MarkerFieldCalibration, MarkerObservation};
use crate::sensors::{GnssFix, GnssSample, ImuSample};
use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const GNSS_COLUMNS: [&str; 8] = [
    "t_s",
    "east_m",
    "north_m",
    "up_m",
    "fix",
    "var_east_m2",
    "var_north_m2",
    "var_up_m2",
];
pub const MAG_COLUMNS: [&str; 4] = ["t_s", "mx", "my", "mz"];
pub const IMU_COLUMNS: [&str; 7] = ["t_s", "gx", "gy", "gz", "ax", "ay", "az"];
pub const MARKER_COLUMNS: [&str; 10] = [
    "image_id",
    "t_s",
    "marker_id",
    "qw",
    "qx",
    "qy",
    "qz",
    "tx",
    "ty",
    "tz",
];
pub const MOTOR_COLUMNS: [&str; 5] = ["t_s", "m1", "m2", "m3", "m4"];
pub const POSE_COLUMNS: [&str; 8] = ["t_s", "px", "py", "pz", "qw", "qx", "qy", "qz"];
pub const MARKER_CAL_COLUMNS: [&str; 8] = ["marker_id", "qw", "qx", "qy", "qz", "tx", "ty", "tz"];
pub const RPM_TABLE_COLUMNS: [&str; 2] = ["rate", "rpm"];

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    ParseError {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path}: line {line}: timestamp does not increase")]
    NonMonotonicTime { path: PathBuf, line: u64 },
    #[error("{path}: missing column {name}")]
    MissingColumn { path: PathBuf, name: String },
}

struct Row {
    line: u64,
    fields: Vec<String>,
}

impl Row {
    fn f64(&self, k: usize, path: &Path) -> Result<f64, IoError> {
        let s = self.fields[k].trim();
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| IoError::ParseError {
                path: path.to_path_buf(),
                line: self.line,
                message: format!("invalid number {s:?}"),
            })
    }

    fn int(&self, k: usize, path: &Path) -> Result<u64, IoError> {
        let s = self.fields[k].trim();
        s.parse::<u64>().map_err(|_| IoError::ParseError {
            path: path.to_path_buf(),
            line: self.line,
            message: format!("invalid non-negative integer {s:?}"),
        })
    }

    fn vec3(&self, k: usize, path: &Path) -> Result<Vec3, IoError> {
        Ok(Vec3::new(
            self.f64(k, path)?,
            self.f64(k + 1, path)?,
            self.f64(k + 2, path)?,
        ))
    }
}

/// Reads the named columns of a CSV file, reordered to match `columns`.
fn read_table(path: &Path, columns: &[&str]) -> Result<Vec<Row>, IoError> {
    let io_err = |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    };
    let parse_err = |e: csv::Error| {
        let line = e.position().map_or(0, |p| p.line());
        IoError::ParseError {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        }
    };
    let file = File::open(path).map_err(io_err)?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let header = reader.headers().map_err(parse_err)?.clone();
    let index: Vec<usize> = columns
        .iter()
        .map(|name| {
            header
                .iter()
                .position(|h| h == *name)
                .ok_or_else(|| IoError::MissingColumn {
                    path: path.to_path_buf(),
                    name: name.to_string(),
                })
        })
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(parse_err)?;
        let line = record.position().map_or(0, |p| p.line());
        let fields = index
            .iter()
            .map(|&i| {
                record
                    .get(i)
                    .map(str::to_string)
                    .ok_or_else(|| IoError::ParseError {
                        path: path.to_path_buf(),
                        line,
                        message: "too few fields".into(),
                    })
            })
            .collect::<Result<_, _>>()?;
        rows.push(Row { line, fields });
    }
    Ok(rows)
}

fn check_monotonic<T>(path: &Path, rows: &[Row], series: &[Timestamped<T>]) -> Result<(), IoError> {
    match first_non_monotonic(series) {
        Some(i) => Err(IoError::NonMonotonicTime {
            path: path.to_path_buf(),
            line: rows[i].line,
        }),
        None => Ok(()),
    }
}

fn load_series<T>(
    path: &Path,
    columns: &[&str],
    parse: impl Fn(&Row) -> Result<T, IoError>,
) -> Result<TimeSeries<T>, IoError> {
    let rows = read_table(path, columns)?;
    let series = rows
        .iter()
        .map(|r| Ok(Timestamped::new(r.f64(0, path)?, parse(r)?)))
        .collect::<Result<Vec<_>, IoError>>()?;
    check_monotonic(path, &rows, &series)?;
    Ok(series)
}

pub fn load_gnss(path: &Path) -> Result<TimeSeries<GnssSample>, IoError> {
    load_series(path, &GNSS_COLUMNS, |r| {
        let fix = GnssFix::parse(r.fields[4].trim()).ok_or_else(|| IoError::ParseError {
            path: path.to_path_buf(),
            line: r.line,
            message: format!("unknown fix type {:?}", r.fields[4]),
        })?;
        let variance = r.vec3(5, path)?;
        if variance.iter().any(|v| *v < 0.0) {
            return Err(IoError::ParseError {
                path: path.to_path_buf(),
                line: r.line,
                message: "negative variance".into(),
            });
        }
        Ok(GnssSample {
            position: r.vec3(1, path)?,
            fix,
            variance,
        })
    })
}

pub fn load_mag(path: &Path) -> Result<TimeSeries<Vec3>, IoError> {
    load_series(path, &MAG_COLUMNS, |r| r.vec3(1, path))
}

pub fn load_imu(path: &Path) -> Result<TimeSeries<ImuSample>, IoError> {
    load_series(path, &IMU_COLUMNS, |r| {
        Ok(ImuSample {
            gyro: r.vec3(1, path)?,
            accel: r.vec3(4, path)?,
        })
    })
}

pub fn load_motor_rates(path: &Path) -> Result<TimeSeries<[f64; 4]>, IoError> {
    load_series(path, &MOTOR_COLUMNS, |r| {
        Ok([
            r.f64(1, path)?,
            r.f64(2, path)?,
            r.f64(3, path)?,
            r.f64(4, path)?,
        ])
    })
}

fn parse_pose(r: &Row, q: usize, t: usize, path: &Path) -> Result<Pose, IoError> {
    let quat = [
        r.f64(q, path)?,
        r.f64(q + 1, path)?,
        r.f64(q + 2, path)?,
        r.f64(q + 3, path)?,
    ];
    let norm = quat.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(IoError::ParseError {
            path: path.to_path_buf(),
            line: r.line,
            message: format!("quaternion norm {norm} is not 1"),
        });
    }
    Ok(Pose::from_quaternion_wxyz(quat, r.vec3(t, path)?))
}

pub fn load_poses(path: &Path) -> Result<TimeSeries<Pose>, IoError> {
    load_series(path, &POSE_COLUMNS, |r| parse_pose(r, 4, 1, path))
}

/// Marker detections; timestamps may repeat within one image but must not
/// decrease.
pub fn load_markers(path: &Path) -> Result<TimeSeries<MarkerObservation>, IoError> {
    let rows = read_table(path, &MARKER_COLUMNS)?;
    let mut out: TimeSeries<MarkerObservation> = Vec::with_capacity(rows.len());
    for r in &rows {
        let t = r.f64(1, path)?;
        if out.last().is_some_and(|p| t < p.t) {
            return Err(IoError::NonMonotonicTime {
                path: path.to_path_buf(),
                line: r.line,
            });
        }
        let marker_id = u32::try_from(r.int(2, path)?).map_err(|_| IoError::ParseError {
            path: path.to_path_buf(),
            line: r.line,
            message: "marker id out of range".into(),
        })?;
        out.push(Timestamped::new(
            t,
            MarkerObservation {
                image_id: r.int(0, path)?,
                marker_id,
                pose: parse_pose(r, 3, 7, path)?,
            },
        ));
    }
    Ok(out)
}

pub fn load_marker_calibration(path: &Path) -> Result<BTreeMap<u32, Pose>, IoError> {
    let rows = read_table(path, &MARKER_CAL_COLUMNS)?;
    let mut out = BTreeMap::new();
    for r in &rows {
        let id = u32::try_from(r.int(0, path)?).map_err(|_| IoError::ParseError {
            path: path.to_path_buf(),
            line: r.line,
            message: "marker id out of range".into(),
        })?;
        if out.insert(id, parse_pose(r, 1, 5, path)?).is_some() {
            return Err(IoError::ParseError {
                path: path.to_path_buf(),
                line: r.line,
                message: format!("duplicate marker {id}"),
            });
        }
    }
    Ok(out)
}

pub fn load_rpm_table(path: &Path) -> Result<Vec<(f64, f64)>, IoError> {
    read_table(path, &RPM_TABLE_COLUMNS)?
        .iter()
        .map(|r| Ok((r.f64(0, path)?, r.f64(1, path)?)))
        .collect()
}

/// Buffered CSV writer with a fixed header.
pub struct CsvWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self, IoError> {
        let file = File::create(path).map_err(|source| IoError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut w = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        w.raw(&header.join(","))?;
        Ok(w)
    }

    fn raw(&mut self, line: &str) -> Result<(), IoError> {
        writeln!(self.out, "{line}").map_err(|source| IoError::Io {
            path: self.path.clone(),
            source,
        })
    }

    pub fn row<D: Display>(&mut self, fields: &[D]) -> Result<(), IoError> {
        let line = fields
            .iter()
            .map(|f| f.to_string())
            .collect::<Vec<_>>()
            .join(",");
        self.raw(&line)
    }

    pub fn finish(mut self) -> Result<(), IoError> {
        self.out.flush().map_err(|source| IoError::Io {
            path: self.path.clone(),
            source,
        })
    }
}

fn pose_fields(p: &Pose) -> [f64; 7] {
    let q = p.quaternion_wxyz();
    [
        q[0],
        q[1],
        q[2],
        q[3],
        p.translation.x,
        p.translation.y,
        p.translation.z,
    ]
}

pub fn write_gnss(path: &Path, series: &[Timestamped<GnssSample>]) -> Result<(), IoError> {
    let mut w = CsvWriter::create(path, &GNSS_COLUMNS)?;
    for s in series {
        let (p, v) = (s.value.position, s.value.variance);
        w.row(&[
            s.t.to_string(),
            p.x.to_string(),
            p.y.to_string(),
            p.z.to_string(),
            s.value.fix.as_str().to_string(),
            v.x.to_string(),
            v.y.to_string(),
            v.z.to_string(),
        ])?;
    }
    w.finish()
}

pub fn write_mag(path: &Path, series: &[Timestamped<Vec3>]) -> Result<(), IoError> {
    let mut w = CsvWriter::create(path, &MAG_COLUMNS)?;
    for s in series {
        w.row(&[s.t, s.value.x, s.value.y, s.value.z])?;
    }
    w.finish()
}

pub fn write_imu(path: &Path, series: &[Timestamped<ImuSample>]) -> Result<(), IoError> {
    let mut w = CsvWriter::create(path, &IMU_COLUMNS)?;
    for s in series {
        let (g, a) = (s.value.gyro, s.value.accel);
        w.row(&[s.t, g.x, g.y, g.z, a.x, a.y, a.z])?;
    }
    w.finish()
}

pub fn write_motor_rates(path: &Path, series: &[Timestamped<[f64; 4]>]) -> Result<(), IoError> {
    write_quad_series(path, &MOTOR_COLUMNS, series)
}

/// Time series of four values per sample, e.g. per-motor frequencies.
pub fn write_quad_series(
    path: &Path,
    header: &[&str; 5],
    series: &[Timestamped<[f64; 4]>],
) -> Result<(), IoError> {
    let mut w = CsvWriter::create(path, header)?;
    for s in series {
        w.row(&[s.t, s.value[0], s.value[1], s.value[2], s.value[3]])?;
    }
    w.finish()
}

/// Poses as `t_s, px, py, pz, qw, qx, qy, qz` with `qw ≥ 0`.
pub fn write_poses(path: &Path, series: &[Timestamped<Pose>]) -> Result<(), IoError> {
    let mut w = CsvWriter::create(path, &POSE_COLUMNS)?;
    for s in series {
        let f = pose_fields(&s.value);
        w.row(&[s.t, f[4], f[5], f[6], f[0], f[1], f[2], f[3]])?;
    }
    w.finish()
}

pub fn write_markers(
    path: &Path,
    series: &[Timestamped<MarkerObservation>],
) -> Result<(), IoError> {
    let mut w = CsvWriter::create(path, &MARKER_COLUMNS)?;
    for s in series {
        let f = pose_fields(&s.value.pose);
        let mut row = vec![
            s.value.image_id.to_string(),
            s.t.to_string(),
            s.value.marker_id.to_string(),
        ];
        row.extend(f.iter().map(f64::to_string));
        w.row(&row)?;
    }
    w.finish()
}

pub fn write_marker_calibration(
    path: &Path,
    field: &MarkerFieldCalibration,
) -> Result<(), IoError> {
    let mut w = CsvWriter::create(path, &MARKER_CAL_COLUMNS)?;
    for (id, pose) in &field.poses {
        let mut row = vec![id.to_string()];
        row.extend(pose_fields(pose).iter().map(f64::to_string));
        w.row(&row)?;
    }
    w.finish()
}

pub fn write_rpm_table(path: &Path, rows: &[(f64, f64)]) -> Result<(), IoError> {
    let mut w = CsvWriter::create(path, &RPM_TABLE_COLUMNS)?;
    for (rate, rpm) in rows {
        w.row(&[rate, rpm])?;
    }
    w.finish()
}
