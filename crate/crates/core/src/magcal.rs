//! Magnetometer calibration.
//!
//! Intrinsics: an algebraic ellipsoid fit yields the hard-iron offset `b_ct`
//! and the symmetric positive-definite sphere transform `t_sp`, applied as
//! `m_corr = t_sp (m_raw − b_ct)`.
//!
//! Extrinsics: from static poses, the rotation `R_I_M` and the local
//! inclination `I` are found by making the gravity/field dot product
//! `gᵢ · (R_I_M mᵢ)` equal to `sin I` for every pose. The dot product is
//! independent of the vehicle attitude, which is what makes the cost work
//! without knowing the poses.

use crate::geometry::{exp_so3, skew, RotationMatrix, Timestamped, UnitVec3, Vec3};
use crate::sensors::ImuSample;
use nalgebra::{DMatrix, Matrix3, Matrix4, SymmetricEigen, Unit, Vector4};
use thiserror::Error;

pub const MIN_ELLIPSOID_SAMPLES: usize = 10;
/// Maximum condition number of the stacked gravity directions.
pub const MAX_GRAVITY_CONDITION: f64 = 1e3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MagCalError {
    #[error("need at least {MIN_ELLIPSOID_SAMPLES} samples, got {0}")]
    TooFewSamples(usize),
    #[error("samples do not constrain an ellipsoid: {0}")]
    DegenerateFit(&'static str),
    #[error("static pose set is ill-conditioned (condition number {0:.3e})")]
    IllConditioned(f64),
    #[error("extrinsic optimisation did not converge (rms residual {0:.3e})")]
    NonConvergence(f64),
}

/// Hard-iron offset and soft-iron correction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipsoidCalibration {
    pub offset: Vec3,
    pub transform: Matrix3<f64>,
}

impl Default for EllipsoidCalibration {
    fn default() -> Self {
        Self::identity()
    }
}

impl EllipsoidCalibration {
    pub fn identity() -> Self {
        Self {
            offset: Vec3::zeros(),
            transform: Matrix3::identity(),
        }
    }

    pub fn correct(&self, m_raw: &Vec3) -> Vec3 {
        correct_sample(m_raw, self)
    }
}

pub fn correct_sample(m_raw: &Vec3, cal: &EllipsoidCalibration) -> Vec3 {
    cal.transform * (m_raw - cal.offset)
}

/// Least-squares quadric fit `xᵀQx + 2qᵀx + k = 0` restricted to ellipsoids.
///
/// Samples are centred and scaled before the fit. The returned transform is
/// the SPD square root of the normalised quadric, rescaled so the corrected
/// samples have unit RMS norm.
pub fn fit_ellipsoid(samples: &[Vec3]) -> Result<EllipsoidCalibration, MagCalError> {
    let n = samples.len();
    if n < MIN_ELLIPSOID_SAMPLES {
        return Err(MagCalError::TooFewSamples(n));
    }
    let mean = samples.iter().sum::<Vec3>() / n as f64;
    let scale = (samples
        .iter()
        .map(|s| (s - mean).norm_squared())
        .sum::<f64>()
        / n as f64)
        .sqrt();
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(MagCalError::DegenerateFit("samples coincide"));
    }

    let design = DMatrix::from_fn(n, 10, |r, c| {
        let p = (samples[r] - mean) / scale;
        match c {
            0 => p.x * p.x,
            1 => p.y * p.y,
            2 => p.z * p.z,
            3 => 2.0 * p.x * p.y,
            4 => 2.0 * p.x * p.z,
            5 => 2.0 * p.y * p.z,
            6 => 2.0 * p.x,
            7 => 2.0 * p.y,
            8 => 2.0 * p.z,
            _ => 1.0,
        }
    });
    // Null vector from the 10x10 normal matrix keeps memory independent of n.
    let normal = design.transpose() * &design;
    let eig = SymmetricEigen::new(normal);
    let mut idx: Vec<usize> = (0..10).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let largest = eig.eigenvalues[idx[9]];
    if eig.eigenvalues[idx[1]] <= 1e-12 * largest {
        return Err(MagCalError::DegenerateFit(
            "quadric not unique (planar or great-circle coverage)",
        ));
    }
    let p = eig.eigenvectors.column(idx[0]).into_owned();

    let mut quad = Matrix3::new(p[0], p[3], p[4], p[3], p[1], p[5], p[4], p[5], p[2]);
    let mut lin = Vec3::new(p[6], p[7], p[8]);
    let mut k = p[9];
    let q_eig = SymmetricEigen::new(quad);
    let (min_ev, max_ev) = q_eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if max_ev < 0.0 {
        quad = -quad;
        lin = -lin;
        k = -k;
    } else if min_ev <= 0.0 {
        return Err(MagCalError::DegenerateFit("quadric is not an ellipsoid"));
    }

    let quad_inv = quad
        .try_inverse()
        .ok_or(MagCalError::DegenerateFit("singular quadric"))?;
    let centre = -(quad_inv * lin);
    let radius_sq = centre.dot(&(quad * centre)) - k;
    if !(radius_sq > 0.0) {
        return Err(MagCalError::DegenerateFit("imaginary ellipsoid"));
    }
    let shape = SymmetricEigen::new(quad / radius_sq);
    let sqrt_ev = shape.eigenvalues.map(|v| v.max(0.0).sqrt());
    let root =
        shape.eigenvectors * Matrix3::from_diagonal(&sqrt_ev) * shape.eigenvectors.transpose();
    // symmetrise against round-off
    let root = (root + root.transpose()) * 0.5;

    let offset = mean + centre * scale;
    let mut transform = root / scale;
    let rms = (samples
        .iter()
        .map(|s| (transform * (s - offset)).norm_squared())
        .sum::<f64>()
        / n as f64)
        .sqrt();
    transform /= rms;
    Ok(EllipsoidCalibration { offset, transform })
}

/// Gravity and corrected field directions observed during static poses.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticOrientationSet {
    poses: Vec<(UnitVec3, UnitVec3)>,
}

impl StaticOrientationSet {
    /// `poses` holds `(gravity direction in IMU frame, field direction in
    /// magnetometer frame)` per static pose. Gravity points down.
    pub fn new(poses: Vec<(UnitVec3, UnitVec3)>) -> Result<Self, MagCalError> {
        if poses.len() < 3 {
            return Err(MagCalError::IllConditioned(f64::INFINITY));
        }
        let stacked = DMatrix::from_fn(poses.len(), 3, |r, c| poses[r].0[c]);
        let sv = stacked.singular_values();
        let max = sv.max();
        let min = sv.min();
        let cond = if min > 0.0 { max / min } else { f64::INFINITY };
        if !(cond < MAX_GRAVITY_CONDITION) {
            return Err(MagCalError::IllConditioned(cond));
        }
        Ok(Self { poses })
    }

    pub fn poses(&self) -> &[(UnitVec3, UnitVec3)] {
        &self.poses
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MagExtrinsics {
    /// Rotation taking magnetometer-frame vectors into the IMU frame.
    pub r_i_m: RotationMatrix,
    /// Magnetic inclination, radians, positive down.
    pub inclination: f64,
    pub rms_residual: f64,
}

fn extrinsic_cost(data: &StaticOrientationSet, r: &RotationMatrix, incl: f64) -> f64 {
    let s = incl.sin();
    data.poses
        .iter()
        .map(|(g, m)| (g.dot(&(r * m.into_inner())) - s).powi(2))
        .sum()
}

/// The 24 proper rotations of the cube, used as optimiser starting points.
fn cube_rotations() -> Vec<RotationMatrix> {
    let mut out = Vec::with_capacity(24);
    let axes = [
        Vec3::x(),
        -Vec3::x(),
        Vec3::y(),
        -Vec3::y(),
        Vec3::z(),
        -Vec3::z(),
    ];
    for a in &axes {
        for b in &axes {
            if a.dot(b).abs() > 0.5 {
                continue;
            }
            let c = a.cross(b);
            let m = Matrix3::from_columns(&[*a, *b, c]);
            out.push(RotationMatrix::from_matrix_unchecked(m));
        }
    }
    out
}

const EXTRINSIC_MAX_ITER: usize = 100;

fn refine_extrinsics(
    data: &StaticOrientationSet,
    mut r: RotationMatrix,
    mut incl: f64,
) -> (RotationMatrix, f64, f64, bool) {
    let mut cost = extrinsic_cost(data, &r, incl);
    for _ in 0..EXTRINSIC_MAX_ITER {
        let mut jtj = Matrix4::<f64>::zeros();
        let mut jtr = Vector4::<f64>::zeros();
        let s = incl.sin();
        let c = incl.cos();
        for (g, m) in &data.poses {
            let m = m.into_inner();
            let res = g.dot(&(r * m)) - s;
            // d/dδ gᵀ R exp(δ) m = −gᵀ R ⌊m⌋
            let jr = -(g.transpose() * r.matrix() * skew(&m));
            let row = Vector4::new(jr[0], jr[1], jr[2], -c);
            jtj += row * row.transpose();
            jtr += row * res;
        }
        // Small Levenberg term keeps the 4x4 system solvable at flat points.
        let damped = jtj + Matrix4::identity() * (1e-12 * (1.0 + jtj.trace()));
        let Some(step) = damped.lu().solve(&(-jtr)) else {
            return (r, incl, cost, false);
        };
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let d = step * alpha;
            let r_new = r * exp_so3(&Vec3::new(d[0], d[1], d[2]));
            let i_new =
                (incl + d[3]).clamp(-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2);
            let c_new = extrinsic_cost(data, &r_new, i_new);
            if c_new <= cost {
                r = r_new;
                incl = i_new;
                cost = c_new;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted || (step * alpha).norm() < 1e-12 {
            return (r, incl, cost, true);
        }
    }
    (r, incl, cost, false)
}

/// Joint estimate of `R_I_M` and inclination.
pub fn estimate_extrinsics(data: &StaticOrientationSet) -> Result<MagExtrinsics, MagCalError> {
    let n = data.poses.len() as f64;
    let mut best: Option<(RotationMatrix, f64, f64, bool)> = None;
    for start in cube_rotations() {
        let mean_dot = data
            .poses
            .iter()
            .map(|(g, m)| g.dot(&(start * m.into_inner())))
            .sum::<f64>()
            / n;
        let incl0 = mean_dot.clamp(-1.0, 1.0).asin();
        let candidate = refine_extrinsics(data, start, incl0);
        if best.as_ref().map_or(true, |b| candidate.2 < b.2) {
            best = Some(candidate);
        }
    }
    let (r, incl, cost, converged) = best.expect("at least one start");
    let rms = (cost / n).sqrt();
    if !converged {
        return Err(MagCalError::NonConvergence(rms));
    }
    // Renormalise accumulated round-off.
    let r = crate::geometry::project_to_so3(r.matrix()).unwrap_or(r);
    Ok(MagExtrinsics {
        r_i_m: r,
        inclination: incl,
        rms_residual: rms,
    })
}

/// Time windows in which the gyro norm stays below `gyro_threshold` (rad/s)
/// for at least `min_duration` seconds.
pub fn detect_static_windows(
    imu: &[Timestamped<ImuSample>],
    gyro_threshold: f64,
    min_duration: f64,
) -> Vec<(f64, f64)> {
    let mut windows = Vec::new();
    let mut start: Option<f64> = None;
    let mut last = 0.0;
    for s in imu {
        if s.value.gyro.norm() < gyro_threshold {
            if start.is_none() {
                start = Some(s.t);
            }
            last = s.t;
        } else if let Some(t0) = start.take() {
            if last - t0 >= min_duration {
                windows.push((t0, last));
            }
        }
    }
    if let Some(t0) = start {
        if last - t0 >= min_duration {
            windows.push((t0, last));
        }
    }
    windows
}

/// Down-pointing gravity direction from a mean specific-force reading.
pub fn gravity_direction_from_accel(mean_accel: &Vec3) -> Option<UnitVec3> {
    Unit::try_new(-mean_accel, 1e-9)
}

/// Averages accelerometer and corrected magnetometer data over each window.
pub fn build_static_set(
    imu: &[Timestamped<ImuSample>],
    mag: &[Timestamped<Vec3>],
    intrinsics: &EllipsoidCalibration,
    windows: &[(f64, f64)],
) -> Result<StaticOrientationSet, MagCalError> {
    let mut poses = Vec::new();
    for &(t0, t1) in windows {
        let inside = |t: f64| t >= t0 && t <= t1;
        let accel: Vec<Vec3> = imu
            .iter()
            .filter(|s| inside(s.t))
            .map(|s| s.value.accel)
            .collect();
        let fields: Vec<Vec3> = mag
            .iter()
            .filter(|s| inside(s.t))
            .map(|s| intrinsics.correct(&s.value))
            .collect();
        if accel.is_empty() || fields.is_empty() {
            continue;
        }
        let a = accel.iter().sum::<Vec3>() / accel.len() as f64;
        let m = fields.iter().sum::<Vec3>() / fields.len() as f64;
        if let (Some(g), Some(m)) = (gravity_direction_from_accel(&a), Unit::try_new(m, 1e-12)) {
            poses.push((g, m));
        }
    }
    StaticOrientationSet::new(poses)
}
