//! Forward-modelled sensor data for tests, fixtures and benchmarks.
//!
//! Every generator is deterministic for a given seed.

use crate::attitude::{world_mag_vector, AntennaCalibration, WorldMagneticModel};
use crate::geometry::{exp_so3, log_so3, Pose, RotationMatrix, TimeSeries, Timestamped, Vec3};
use crate::magcal::EllipsoidCalibration;
use crate::markers::{MarkerId, MarkerObservation};
use crate::pipeline::Dataset;
use crate::sensors::{GnssFix, GnssSample, ImuSample};
use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_4;

pub const GRAVITY: f64 = 9.81;

/// `amplitude · sin(frequency · t + phase)`, frequency in rad/s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Harmonic {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

const fn h(amplitude: f64, frequency: f64, phase: f64) -> Harmonic {
    Harmonic {
        amplitude,
        frequency,
        phase,
    }
}

fn eval(hs: &[Harmonic], t: f64) -> f64 {
    hs.iter()
        .map(|h| h.amplitude * (h.frequency * t + h.phase).sin())
        .sum()
}

fn eval_dd(hs: &[Harmonic], t: f64) -> f64 {
    hs.iter()
        .map(|h| -h.amplitude * h.frequency * h.frequency * (h.frequency * t + h.phase).sin())
        .sum()
}

/// Smooth IMU trajectory built from sums of sinusoids. Time is measured from
/// `t0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t0: f64,
    pub origin: Vec3,
    pub position: [Vec<Harmonic>; 3],
    pub yaw: Vec<Harmonic>,
    pub pitch: Vec<Harmonic>,
    pub roll: Vec<Harmonic>,
}

impl Trajectory {
    /// Outdoor survey flight: varying speed, strong yaw motion, mild tilt.
    pub fn survey_flight(t0: f64) -> Self {
        Self {
            t0,
            origin: Vec3::new(0.0, 0.0, 10.0),
            position: [
                vec![h(20.0, 0.11, 0.0), h(5.0, 0.37, 0.4), h(0.8, 1.3, 0.2)],
                vec![h(15.0, 0.07, 0.5), h(4.0, 0.29, 1.9), h(0.6, 1.1, 2.4)],
                vec![h(2.0, 0.23, 0.0), h(0.3, 0.9, 1.0)],
            ],
            yaw: vec![
                h(1.2, 0.21, 0.0),
                h(0.6, 0.53, 1.0),
                h(0.3, 1.1, 0.3),
                h(0.1, 2.3, 0.9),
            ],
            pitch: vec![h(0.03, 0.9, 0.3), h(0.01, 2.1, 0.0)],
            roll: vec![h(0.03, 0.7, 0.0), h(0.01, 1.7, 1.2)],
        }
    }

    pub fn rotation(&self, t: f64) -> RotationMatrix {
        let s = t - self.t0;
        RotationMatrix::from_euler_angles(
            eval(&self.roll, s),
            eval(&self.pitch, s),
            eval(&self.yaw, s),
        )
    }

    pub fn translation(&self, t: f64) -> Vec3 {
        let s = t - self.t0;
        self.origin
            + Vec3::new(
                eval(&self.position[0], s),
                eval(&self.position[1], s),
                eval(&self.position[2], s),
            )
    }

    /// `T_W_I`
    pub fn pose(&self, t: f64) -> Pose {
        Pose::new(self.rotation(t), self.translation(t))
    }

    pub fn acceleration(&self, t: f64) -> Vec3 {
        let s = t - self.t0;
        Vec3::new(
            eval_dd(&self.position[0], s),
            eval_dd(&self.position[1], s),
            eval_dd(&self.position[2], s),
        )
    }

    /// Body-frame angular velocity by central difference on SO(3).
    pub fn body_rate(&self, t: f64) -> Vec3 {
        let dt = 1e-5;
        log_so3(&(self.rotation(t - dt).inverse() * self.rotation(t + dt))) / (2.0 * dt)
    }

    /// Specific force measured by an accelerometer in the body frame.
    pub fn specific_force(&self, t: f64) -> Vec3 {
        self.rotation(t).inverse() * (self.acceleration(t) + Vec3::new(0.0, 0.0, GRAVITY))
    }
}

/// Clock offsets of each sensor relative to GNSS antenna 1. A sensor with
/// offset `d` stamps a sample taken at true time `t` as `t + d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorOffsets {
    pub gnss2: f64,
    pub mag: f64,
    pub imu: f64,
}

impl Default for SensorOffsets {
    fn default() -> Self {
        Self {
            gnss2: 0.12,
            mag: 0.08,
            imu: 0.05,
        }
    }
}

/// Dual antennas on a 1.2 m baseline at −45° in the IMU frame.
pub fn reference_antennas() -> AntennaCalibration {
    let half = 0.6 * Vec3::new(FRAC_PI_4.cos(), -FRAC_PI_4.sin(), 0.0);
    let up = Vec3::new(0.0, 0.0, 0.15);
    AntennaCalibration::new(
        up + half,
        up - half,
        RotationMatrix::from_axis_angle(&Vec3::z_axis(), -FRAC_PI_4),
    )
    .expect("non-zero baseline")
}

/// Hard- and soft-iron distortion used by the reference vehicle, given as
/// the calibration that undoes it.
pub fn reference_mag_distortion() -> EllipsoidCalibration {
    EllipsoidCalibration {
        offset: Vec3::new(0.1, -0.2, 0.05),
        transform: Matrix3::from_diagonal(&Vec3::new(1.2, 0.9, 1.0))
            .try_inverse()
            .expect("invertible"),
    }
}

/// Raw magnetometer reading for a field vector expressed in the sensor frame.
pub fn distort(field_sensor: &Vec3, cal: &EllipsoidCalibration) -> Vec3 {
    cal.transform.try_inverse().expect("invertible calibration") * field_sensor + cal.offset
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardModel {
    pub trajectory: Trajectory,
    pub antennas: AntennaCalibration,
    pub magnetic_model: WorldMagneticModel,
    /// Field magnitude in sensor units.
    pub field_strength: f64,
    pub mag_distortion: EllipsoidCalibration,
    /// Magnetometer-to-IMU rotation.
    pub r_i_m: RotationMatrix,
    pub offsets: SensorOffsets,
    pub duration: f64,
    pub gnss_rate: f64,
    pub mag_rate: f64,
    pub imu_rate: f64,
    /// Per-axis antenna position noise, metres.
    pub gnss_sigma: f64,
    /// Per-axis magnetometer noise as a fraction of the field strength.
    pub mag_sigma: f64,
    pub gyro_sigma: f64,
    pub accel_sigma: f64,
    /// GNSS epoch indices at which both antennas report the same position.
    pub degenerate_epochs: Vec<usize>,
    pub seed: u64,
}

impl ForwardModel {
    /// RTK-fixed flight with the reference vehicle and Klagenfurt field.
    pub fn reference(seed: u64) -> Self {
        let t0 = 1_700_000_000.0;
        Self {
            trajectory: Trajectory::survey_flight(t0),
            antennas: reference_antennas(),
            magnetic_model: WorldMagneticModel::klagenfurt(),
            field_strength: 0.483,
            mag_distortion: reference_mag_distortion(),
            r_i_m: RotationMatrix::from_euler_angles(0.02, -0.03, 0.05),
            offsets: SensorOffsets::default(),
            duration: 200.0,
            gnss_rate: 10.0,
            mag_rate: 50.0,
            imu_rate: 200.0,
            gnss_sigma: 0.01,
            mag_sigma: 0.002,
            gyro_sigma: 0.002,
            accel_sigma: 0.02,
            degenerate_epochs: Vec::new(),
            seed,
        }
    }

    /// Same flight without noise and without clock offsets.
    pub fn noiseless(seed: u64) -> Self {
        Self {
            offsets: SensorOffsets {
                gnss2: 0.0,
                mag: 0.0,
                imu: 0.0,
            },
            gnss_sigma: 0.0,
            mag_sigma: 0.0,
            gyro_sigma: 0.0,
            accel_sigma: 0.0,
            ..Self::reference(seed)
        }
    }

    fn times(&self, rate: f64) -> impl Iterator<Item = f64> + '_ {
        let n = (self.duration * rate).floor() as usize;
        (0..=n).map(move |k| self.trajectory.t0 + k as f64 / rate)
    }

    /// Field vector in the magnetometer frame at true time `t`.
    pub fn mag_field_sensor(&self, t: f64) -> Vec3 {
        let m_w = world_mag_vector(&self.magnetic_model).into_inner() * self.field_strength;
        self.r_i_m.inverse() * (self.trajectory.rotation(t).inverse() * m_w)
    }

    pub fn generate(&self) -> SyntheticFlight {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut noise3 = |sigma: f64| -> Vec3 {
            if sigma == 0.0 {
                return Vec3::zeros();
            }
            let d = Normal::new(0.0, sigma).expect("valid sigma");
            Vec3::new(d.sample(&mut rng), d.sample(&mut rng), d.sample(&mut rng))
        };

        let variance = Vec3::repeat(self.gnss_sigma * self.gnss_sigma);
        let mut gnss1 = Vec::new();
        let mut gnss2 = Vec::new();
        let mut truth = Vec::new();
        for (k, t) in self.times(self.gnss_rate).enumerate() {
            let pose = self.trajectory.pose(t);
            let p1 = pose.transform_point(&self.antennas.p_i_g1) + noise3(self.gnss_sigma);
            let mut p2 = pose.transform_point(&self.antennas.p_i_g2) + noise3(self.gnss_sigma);
            if self.degenerate_epochs.contains(&k) {
                p2 = p1;
            }
            gnss1.push(Timestamped::new(
                t,
                GnssSample {
                    position: p1,
                    fix: GnssFix::Fixed,
                    variance,
                },
            ));
            gnss2.push(Timestamped::new(
                t + self.offsets.gnss2,
                GnssSample {
                    position: p2,
                    fix: GnssFix::Fixed,
                    variance,
                },
            ));
            truth.push(Timestamped::new(t, pose));
        }

        let mag_sigma = self.mag_sigma * self.field_strength;
        let mag = self
            .times(self.mag_rate)
            .map(|t| {
                let raw = distort(
                    &(self.mag_field_sensor(t) + noise3(mag_sigma)),
                    &self.mag_distortion,
                );
                Timestamped::new(t + self.offsets.mag, raw)
            })
            .collect();

        let imu = self
            .times(self.imu_rate)
            .map(|t| {
                let sample = ImuSample {
                    gyro: self.trajectory.body_rate(t) + noise3(self.gyro_sigma),
                    accel: self.trajectory.specific_force(t) + noise3(self.accel_sigma),
                };
                Timestamped::new(t + self.offsets.imu, sample)
            })
            .collect();

        SyntheticFlight {
            dataset: Dataset {
                gnss1,
                gnss2,
                mag,
                imu,
                ..Dataset::default()
            },
            truth,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFlight {
    pub dataset: Dataset,
    /// True IMU poses at the GNSS antenna 1 epochs.
    pub truth: TimeSeries<Pose>,
}

/// Static-pose magnetometer calibration session: the vehicle holds a set of
/// orientations and rotates smoothly between them.
#[derive(Debug, Clone, PartialEq)]
pub struct MagCalSession {
    pub imu: TimeSeries<ImuSample>,
    pub mag: TimeSeries<Vec3>,
    pub orientations: Vec<RotationMatrix>,
}

pub fn random_rotation<R: Rng>(rng: &mut R) -> RotationMatrix {
    // uniform on SO(3) via a normalised Gaussian quaternion
    let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
    crate::geometry::quaternion_wxyz_to_rotation(q)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MagCalSettings {
    pub n_orientations: usize,
    pub hold: f64,
    pub transition: f64,
    pub rate: f64,
    pub field_strength: f64,
    pub inclination: f64,
    pub distortion: EllipsoidCalibration,
    pub r_i_m: RotationMatrix,
    /// Per-axis magnetometer noise as a fraction of the field strength.
    pub mag_sigma: f64,
    pub seed: u64,
}

impl Default for MagCalSettings {
    fn default() -> Self {
        Self {
            n_orientations: 12,
            hold: 2.0,
            transition: 1.5,
            rate: 100.0,
            field_strength: 0.483,
            inclination: WorldMagneticModel::klagenfurt().inclination,
            distortion: reference_mag_distortion(),
            r_i_m: RotationMatrix::from_euler_angles(0.02, -0.03, 0.05),
            mag_sigma: 0.0,
            seed: 7,
        }
    }
}

pub fn magcal_session(s: &MagCalSettings) -> MagCalSession {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let orientations: Vec<RotationMatrix> = (0..s.n_orientations)
        .map(|_| random_rotation(&mut rng))
        .collect();
    let m_w = Vec3::new(0.0, s.inclination.cos(), -s.inclination.sin()) * s.field_strength;
    let dt = 1.0 / s.rate;
    let noise = Normal::new(0.0, (s.mag_sigma * s.field_strength).max(f64::MIN_POSITIVE))
        .expect("valid sigma");

    let mut imu = Vec::new();
    let mut mag = Vec::new();
    let mut t = 0.0;
    let mut emit = |r: &RotationMatrix, gyro: Vec3, t: f64, rng: &mut ChaCha8Rng| {
        let accel = r.inverse() * Vec3::new(0.0, 0.0, GRAVITY);
        imu.push(Timestamped::new(t, ImuSample { gyro, accel }));
        let mut field = s.r_i_m.inverse() * (r.inverse() * m_w);
        if s.mag_sigma > 0.0 {
            field += Vec3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng));
        }
        mag.push(Timestamped::new(t, distort(&field, &s.distortion)));
    };
    for (k, r) in orientations.iter().enumerate() {
        let hold_n = (s.hold * s.rate).round() as usize;
        for _ in 0..hold_n {
            emit(r, Vec3::zeros(), t, &mut rng);
            t += dt;
        }
        if let Some(next) = orientations.get(k + 1) {
            let omega = log_so3(&(r.inverse() * next));
            let n = (s.transition * s.rate).round() as usize;
            let rate = omega / s.transition;
            for i in 0..n {
                let ri = r * exp_so3(&(omega * (i as f64 + 0.5) / n as f64));
                emit(&ri, rate, t, &mut rng);
                t += dt;
            }
        }
    }
    MagCalSession {
        imu,
        mag,
        orientations,
    }
}

/// Points on an ellipsoid: the sphere of radius `field` distorted by `cal`.
pub fn ellipsoid_samples(
    n: usize,
    field: f64,
    cal: &EllipsoidCalibration,
    sigma: f64,
    seed: u64,
) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, (sigma * field).max(f64::MIN_POSITIVE)).expect("valid sigma");
    (0..n)
        .map(|_| {
            let d: Vec3 = Vec3::from_fn(|_, _| rng.sample(StandardNormal)).normalize() * field;
            let e = if sigma > 0.0 {
                Vec3::from_fn(|_, _| noise.sample(&mut rng))
            } else {
                Vec3::zeros()
            };
            distort(&(d + e), cal)
        })
        .collect()
}

/// Rectangular marker grid on the ground plane; poses are `T_field_marker`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerGrid {
    pub rows: usize,
    pub cols: usize,
    pub spacing: f64,
    pub poses: BTreeMap<MarkerId, Pose>,
}

impl MarkerGrid {
    pub fn new(rows: usize, cols: usize, spacing: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut poses = BTreeMap::new();
        for r in 0..rows {
            for c in 0..cols {
                let id = (r * cols + c) as MarkerId;
                // markers lie roughly flat with small placement errors
                let tilt = Vec3::new(
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.5..0.5),
                );
                let jitter = Vec3::new(
                    rng.random_range(-0.03..0.03),
                    rng.random_range(-0.03..0.03),
                    0.0,
                );
                poses.insert(
                    id,
                    Pose::new(
                        exp_so3(&tilt),
                        Vec3::new(c as f64 * spacing, r as f64 * spacing, 0.0) + jitter,
                    ),
                );
            }
        }
        Self {
            rows,
            cols,
            spacing,
            poses,
        }
    }

    pub fn id(&self, row: usize, col: usize) -> MarkerId {
        (row * self.cols + col) as MarkerId
    }

    /// Marker nearest the grid centre.
    pub fn central_marker(&self) -> MarkerId {
        self.id((self.rows - 1) / 2, (self.cols - 1) / 2)
    }

    /// Poses relative to `main`.
    pub fn relative_to(&self, main: MarkerId) -> BTreeMap<MarkerId, Pose> {
        let inv = self.poses[&main].inverse();
        self.poses
            .iter()
            .map(|(id, p)| (*id, inv.compose(p)))
            .collect()
    }

    /// Camera looking down on every 2×2 block of markers from 1.5 m, with
    /// `views` jittered viewpoints per block. Detections carry independent
    /// translation noise `sigma_t` (m, per axis) and rotation noise
    /// `sigma_r` (rad, per axis). Each view gets its own image id; the
    /// returned timestamps advance by `dt` per image.
    pub fn observe(
        &self,
        views: usize,
        sigma_t: f64,
        sigma_r: f64,
        dt: f64,
        seed: u64,
    ) -> TimeSeries<MarkerObservation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nt = Normal::new(0.0, sigma_t.max(f64::MIN_POSITIVE)).expect("valid sigma");
        let nr = Normal::new(0.0, sigma_r.max(f64::MIN_POSITIVE)).expect("valid sigma");
        let mut out = Vec::new();
        let mut image = 0u64;
        for r in 0..self.rows.saturating_sub(1) {
            for c in 0..self.cols.saturating_sub(1) {
                let block = [
                    self.id(r, c),
                    self.id(r, c + 1),
                    self.id(r + 1, c),
                    self.id(r + 1, c + 1),
                ];
                let centre = block
                    .iter()
                    .map(|id| self.poses[id].translation)
                    .sum::<Vec3>()
                    / 4.0;
                for _ in 0..views {
                    let look_down =
                        RotationMatrix::from_axis_angle(&Vec3::x_axis(), std::f64::consts::PI);
                    let jitter = exp_so3(&Vec3::new(
                        rng.random_range(-0.1..0.1),
                        rng.random_range(-0.1..0.1),
                        rng.random_range(-0.6..0.6),
                    ));
                    let pos = centre
                        + Vec3::new(
                            rng.random_range(-0.1..0.1),
                            rng.random_range(-0.1..0.1),
                            1.5 + rng.random_range(-0.2..0.2),
                        );
                    let cam = Pose::new(look_down * jitter, pos);
                    let t = image as f64 * dt;
                    for id in block {
                        let exact = cam.inverse().compose(&self.poses[&id]);
                        let noisy = if sigma_t > 0.0 || sigma_r > 0.0 {
                            let dn = Pose::new(
                                exp_so3(&Vec3::from_fn(|_, _| {
                                    if sigma_r > 0.0 {
                                        nr.sample(&mut rng)
                                    } else {
                                        0.0
                                    }
                                })),
                                Vec3::from_fn(|_, _| {
                                    if sigma_t > 0.0 {
                                        nt.sample(&mut rng)
                                    } else {
                                        0.0
                                    }
                                }),
                            );
                            exact.compose(&dn)
                        } else {
                            exact
                        };
                        out.push(Timestamped::new(
                            t,
                            MarkerObservation {
                                image_id: image,
                                marker_id: id,
                                pose: noisy,
                            },
                        ));
                    }
                    image += 1;
                }
            }
        }
        out
    }
}

/// One trajectory observed by three systems, each in its own frame, with
/// overlapping time spans.
#[derive(Debug, Clone, PartialEq)]
pub struct ThreeSegmentFlight {
    pub truth: TimeSeries<Pose>,
    /// Noisy segments, each expressed in its own frame.
    pub segments: [TimeSeries<Pose>; 3],
    /// The same samples without noise.
    pub clean_segments: [TimeSeries<Pose>; 3],
    /// `T_world_frame` per segment; the first is the identity.
    pub frames: [Pose; 3],
    /// Time spans `(start, end)` per segment.
    pub spans: [(f64, f64); 3],
}

pub fn three_segment_flight(sigma_t: f64, sigma_r: f64, seed: u64) -> ThreeSegmentFlight {
    let traj = Trajectory {
        t0: 0.0,
        origin: Vec3::new(0.0, 0.0, 3.0),
        // loops of a few metres so every overlap spans all three axes
        position: [
            vec![h(6.0, 0.15, 0.0), h(2.0, 0.41, 0.7)],
            vec![h(5.0, 0.12, 1.0), h(1.5, 0.37, 0.1)],
            vec![h(1.5, 0.35, 0.0)],
        ],
        yaw: vec![h(1.0, 0.1, 0.0), h(0.3, 0.5, 0.4)],
        pitch: vec![h(0.05, 0.6, 0.0)],
        roll: vec![h(0.05, 0.45, 0.2)],
    };
    let frames = [
        Pose::identity(),
        Pose::new(
            RotationMatrix::from_euler_angles(0.0, 0.0, 0.7),
            Vec3::new(3.0, -2.0, 0.1),
        ),
        Pose::new(
            RotationMatrix::from_euler_angles(0.01, -0.02, -1.1),
            Vec3::new(-4.0, 5.0, -0.2),
        ),
    ];
    let spans = [(0.0, 60.0), (50.0, 110.0), (100.0, 160.0)];
    let rate = 10.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nt = Normal::new(0.0, sigma_t.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let nr = Normal::new(0.0, sigma_r.max(f64::MIN_POSITIVE)).expect("valid sigma");

    let sample_times = |(a, b): (f64, f64)| {
        let n = ((b - a) * rate).round() as usize;
        (0..=n).map(move |k| a + k as f64 / rate)
    };
    let truth: TimeSeries<Pose> = sample_times((spans[0].0, spans[2].1))
        .map(|t| Timestamped::new(t, traj.pose(t)))
        .collect();
    let mut segments: [TimeSeries<Pose>; 3] = Default::default();
    let mut clean: [TimeSeries<Pose>; 3] = Default::default();
    for k in 0..3 {
        let to_frame = frames[k].inverse();
        for t in sample_times(spans[k]) {
            let p = to_frame.compose(&traj.pose(t));
            clean[k].push(Timestamped::new(t, p));
            let dr = exp_so3(&Vec3::from_fn(|_, _| {
                if sigma_r > 0.0 {
                    nr.sample(&mut rng)
                } else {
                    0.0
                }
            }));
            let dt = Vec3::from_fn(|_, _| {
                if sigma_t > 0.0 {
                    nt.sample(&mut rng)
                } else {
                    0.0
                }
            });
            segments[k].push(Timestamped::new(
                t,
                Pose::new(p.rotation * dr, p.translation + dt),
            ));
        }
    }
    ThreeSegmentFlight {
        truth,
        segments,
        clean_segments: clean,
        frames,
        spans,
    }
}

/// Motor commands stepping through the calibrated range, with a matching
/// 900 Hz accelerometer trace whose norm carries the resonance.
#[derive(Debug, Clone, PartialEq)]
pub struct VibrationSession {
    pub motor_rates: TimeSeries<[f64; 4]>,
    pub imu: TimeSeries<ImuSample>,
    pub sample_rate: f64,
}

pub fn vibration_session(
    rates: &[f64],
    step_duration: f64,
    resonance_hz: impl Fn(f64) -> f64,
    noise: f64,
    seed: u64,
) -> VibrationSession {
    let fs = 900.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut motor_rates = Vec::new();
    let mut imu = Vec::new();
    let mut phase = 0.0;
    let mut k = 0usize;
    for &rate in rates {
        let f = resonance_hz(rate);
        let n = (step_duration * fs).round() as usize;
        for i in 0..n {
            let t = k as f64 / fs;
            if i % 9 == 0 {
                motor_rates.push(Timestamped::new(t, [rate; 4]));
            }
            phase += 2.0 * std::f64::consts::PI * f / fs;
            let vib = 0.8 * phase.sin() + if noise > 0.0 { d.sample(&mut rng) } else { 0.0 };
            imu.push(Timestamped::new(
                t,
                ImuSample {
                    gyro: Vec3::zeros(),
                    accel: Vec3::new(0.0, 0.0, GRAVITY + vib),
                },
            ));
            k += 1;
        }
    }
    VibrationSession {
        motor_rates,
        imu,
        sample_rate: fs,
    }
}
