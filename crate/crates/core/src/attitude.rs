//! Rotation from dual-antenna GNSS plus magnetometer.
//!
//! Two directions are known in both the world and the IMU frame: the
//! antenna baseline `g` and the magnetic field `m`. Together with `c = g × m`
//! they form a triad, and `R_W_I` maps the body triad onto the world triad.
//! Three solvers are provided: a linear least-squares fit followed by
//! projection onto SO(3), Gauss-Newton on the tangent space, and the weighted
//! SVD solution of Wahba's problem (the default).

use crate::geometry::{
    compose_position, exp_so3, project_to_so3, skew, svd_rotation, GeometryError, Pose,
    RotationMatrix, TangentVector, Timestamped, UnitVec3, Vec3,
};
use crate::magcal::EllipsoidCalibration;
use nalgebra::{Matrix3, SMatrix, SVector, Unit};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum `‖g × m‖` for two directions to define a triad.
pub const MIN_TRIAD_CROSS: f64 = 1e-6;
pub const DEFAULT_MIN_BASELINE: f64 = 0.1;
/// GNSS-to-magnetometer weight ratio.
pub const DEFAULT_ALPHA: f64 = 50.0;
pub const TANGENT_STEP_TOLERANCE: f64 = 1e-12;
pub const TANGENT_MAX_ITERATIONS: usize = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttitudeError {
    #[error("antenna baseline {0:.4} m below minimum")]
    DegenerateBaseline(f64),
    #[error("baseline and magnetic directions are parallel (|g x m| = {0:.3e})")]
    ParallelVectors(f64),
    #[error("linear system is singular")]
    SingularSystem,
    #[error("Wahba attitude matrix is degenerate (singular values {0:?})")]
    DegenerateSvd([f64; 3]),
    #[error(
        "Gauss-Newton did not converge after {iterations} iterations (residual {residual:.3e})"
    )]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("GNSS epochs not simultaneous: {0} s vs {1} s")]
    EpochMismatch(f64, f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationMethod {
    LinearLs,
    TangentGn,
    WahbaSvd,
}

impl RotationMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            RotationMethod::LinearLs => "linear_ls",
            RotationMethod::TangentGn => "tangent_gn",
            RotationMethod::WahbaSvd => "wahba_svd",
        }
    }
}

/// Antenna lever arms in the IMU frame and the virtual-GNSS-to-IMU rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AntennaCalibration {
    pub p_i_g1: Vec3,
    pub p_i_g2: Vec3,
    pub r_vg_i: RotationMatrix,
}

impl AntennaCalibration {
    pub fn new(p_i_g1: Vec3, p_i_g2: Vec3, r_vg_i: RotationMatrix) -> Result<Self, AttitudeError> {
        let b = (p_i_g1 - p_i_g2).norm();
        if !(b > 0.0) {
            return Err(AttitudeError::DegenerateBaseline(b));
        }
        Ok(Self {
            p_i_g1,
            p_i_g2,
            r_vg_i,
        })
    }

    pub fn baseline(&self) -> f64 {
        (self.p_i_g1 - self.p_i_g2).norm()
    }
}

/// Local magnetic field. Angles in radians; declination positive east,
/// inclination positive down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldMagneticModel {
    pub declination: f64,
    pub inclination: f64,
    pub field_strength_nt: f64,
}

impl WorldMagneticModel {
    /// Dronehall site, Klagenfurt: declination +4°9′, inclination 63°8′.
    pub fn klagenfurt() -> Self {
        Self {
            declination: (4.0 + 9.0 / 60.0f64).to_radians(),
            inclination: (63.0 + 8.0 / 60.0f64).to_radians(),
            field_strength_nt: 48_300.8,
        }
    }
}

/// Field direction in ENU.
pub fn world_mag_vector(model: &WorldMagneticModel) -> UnitVec3 {
    let (sd, cd) = model.declination.sin_cos();
    let (si, ci) = model.inclination.sin_cos();
    Unit::new_normalize(Vec3::new(sd * ci, cd * ci, -si))
}

/// Baseline direction `g`, field direction `m` and `c = normalize(g × m)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionalTriad {
    pub g: UnitVec3,
    pub m: UnitVec3,
    pub c: UnitVec3,
}

impl DirectionalTriad {
    pub fn new(g: &Vec3, m: &Vec3) -> Result<Self, AttitudeError> {
        let g = Unit::try_new(*g, 1e-12).ok_or(AttitudeError::ParallelVectors(0.0))?;
        let m = Unit::try_new(*m, 1e-12).ok_or(AttitudeError::ParallelVectors(0.0))?;
        let cross = g.cross(&m);
        let len = cross.norm();
        if len <= MIN_TRIAD_CROSS {
            return Err(AttitudeError::ParallelVectors(len));
        }
        Ok(Self {
            g,
            m,
            c: Unit::new_unchecked(cross / len),
        })
    }

    /// Columns `[g m c]`.
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_columns(&[
            self.g.into_inner(),
            self.m.into_inner(),
            self.c.into_inner(),
        ])
    }

    pub fn rotated(&self, r: &RotationMatrix) -> Self {
        Self {
            g: Unit::new_unchecked(r * self.g.into_inner()),
            m: Unit::new_unchecked(r * self.m.into_inner()),
            c: Unit::new_unchecked(r * self.c.into_inner()),
        }
    }
}

pub fn build_world_triad(
    p_w_g1: &Vec3,
    p_w_g2: &Vec3,
    m_w: &UnitVec3,
    min_baseline: f64,
) -> Result<DirectionalTriad, AttitudeError> {
    let baseline = p_w_g1 - p_w_g2;
    let len = baseline.norm();
    if !(len > min_baseline) {
        return Err(AttitudeError::DegenerateBaseline(len));
    }
    DirectionalTriad::new(&baseline, m_w)
}

/// Body triad from the antenna lever arms and one raw magnetometer sample,
/// corrected by the intrinsics and rotated into the IMU frame.
pub fn build_body_triad(
    cal: &AntennaCalibration,
    m_raw: &Vec3,
    mag_cal: &EllipsoidCalibration,
    r_i_m: &RotationMatrix,
) -> Result<DirectionalTriad, AttitudeError> {
    let baseline = cal.p_i_g1 - cal.p_i_g2;
    if !(baseline.norm() > 0.0) {
        return Err(AttitudeError::DegenerateBaseline(0.0));
    }
    let m_i = r_i_m * mag_cal.correct(m_raw);
    DirectionalTriad::new(&baseline, &m_i)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationEstimate {
    /// `R_W_I`
    pub rotation: RotationMatrix,
    pub method: RotationMethod,
    /// Norm of the stacked triad residual `[g m c]_w − R [g m c]_i`.
    pub residual: f64,
    pub iterations: usize,
}

fn triad_residual(world: &DirectionalTriad, body: &DirectionalTriad, r: &RotationMatrix) -> f64 {
    (world.matrix() - r.matrix() * body.matrix()).norm()
}

/// Solves `[g m c]_w = R [g m c]_i` for the nine entries of `R`, then
/// projects the result onto SO(3).
pub fn solve_rotation_linear(
    world: &DirectionalTriad,
    body: &DirectionalTriad,
) -> Result<RotationEstimate, AttitudeError> {
    let y = world.matrix();
    let x = body.matrix();
    // Row k of R solves xᵀ r_k = y_k; the 9x9 system is block diagonal.
    let a = SMatrix::<f64, 9, 9>::from_fn(|row, col| {
        let (eq_row, eq_col) = (row / 3, row % 3);
        let (r_row, r_col) = (col / 3, col % 3);
        if eq_row == r_row {
            x[(r_col, eq_col)]
        } else {
            0.0
        }
    });
    let b = SVector::<f64, 9>::from_fn(|row, _| y[(row / 3, row % 3)]);
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.min() <= 1e-12 * smax.max(1.0) {
        return Err(AttitudeError::SingularSystem);
    }
    let sol = svd
        .solve(&b, 0.0)
        .map_err(|_| AttitudeError::SingularSystem)?;
    let unconstrained = Matrix3::from_row_slice(sol.as_slice());
    let rotation = project_to_so3(&unconstrained)?;
    Ok(RotationEstimate {
        rotation,
        method: RotationMethod::LinearLs,
        residual: triad_residual(world, body, &rotation),
        iterations: 0,
    })
}

/// Stacked prediction `h(R) = [R g_i; R m_i; R c_i]`.
fn tangent_prediction(r: &RotationMatrix, body: &DirectionalTriad) -> SVector<f64, 9> {
    let mut h = SVector::<f64, 9>::zeros();
    for (k, v) in [body.g, body.m, body.c].iter().enumerate() {
        h.fixed_rows_mut::<3>(3 * k)
            .copy_from(&(r * v.into_inner()));
    }
    h
}

/// Analytic Jacobian of `h(R exp(δ))` at `δ = 0`: blocks `−R⌊v⌋`.
pub fn tangent_jacobian(r: &RotationMatrix, body: &DirectionalTriad) -> SMatrix<f64, 9, 3> {
    let mut j = SMatrix::<f64, 9, 3>::zeros();
    for (k, v) in [body.g, body.m, body.c].iter().enumerate() {
        j.fixed_view_mut::<3, 3>(3 * k, 0)
            .copy_from(&(-(r.matrix() * skew(&v.into_inner()))));
    }
    j
}

fn stacked_world(world: &DirectionalTriad) -> SVector<f64, 9> {
    let mut y = SVector::<f64, 9>::zeros();
    for (k, v) in [world.g, world.m, world.c].iter().enumerate() {
        y.fixed_rows_mut::<3>(3 * k).copy_from(&v.into_inner());
    }
    y
}

/// Gauss-Newton on the rotation manifold, updating `R ← R exp(δ)`.
///
/// Steps are halved while the cost increases. Without an initial value the
/// unweighted Wahba solution seeds the iteration.
pub fn solve_rotation_tangent(
    world: &DirectionalTriad,
    body: &DirectionalTriad,
    init: Option<TangentVector>,
) -> Result<RotationEstimate, AttitudeError> {
    let mut r = match init {
        Some(w) => exp_so3(&w),
        None => solve_rotation_wahba(world, body, 1.0)?.rotation,
    };
    let y = stacked_world(world);
    let cost = |r: &RotationMatrix| (y - tangent_prediction(r, body)).norm_squared();
    let mut current = cost(&r);

    for iter in 0..TANGENT_MAX_ITERATIONS {
        let j = tangent_jacobian(&r, body);
        let res = y - tangent_prediction(&r, body);
        let jtj = j.transpose() * j;
        let Some(step) = jtj.cholesky().map(|c| c.solve(&(j.transpose() * res))) else {
            return Err(AttitudeError::SingularSystem);
        };
        let mut lambda = 1.0;
        let mut accepted = None;
        while lambda > 1e-10 {
            let candidate = r * exp_so3(&(step * lambda));
            let c = cost(&candidate);
            if c <= current {
                accepted = Some((candidate, c));
                break;
            }
            lambda *= 0.5;
        }
        let step_norm = step.norm() * lambda;
        match accepted {
            Some((candidate, c)) => {
                r = candidate;
                current = c;
            }
            // No descent is possible at machine precision.
            None => {
                return Ok(RotationEstimate {
                    rotation: r,
                    method: RotationMethod::TangentGn,
                    residual: current.sqrt(),
                    iterations: iter,
                })
            }
        }
        if step_norm < TANGENT_STEP_TOLERANCE {
            return Ok(RotationEstimate {
                rotation: project_to_so3(r.matrix())?,
                method: RotationMethod::TangentGn,
                residual: current.sqrt(),
                iterations: iter + 1,
            });
        }
    }
    Err(AttitudeError::NonConvergence {
        iterations: TANGENT_MAX_ITERATIONS,
        residual: current.sqrt(),
    })
}

/// Weighted Wahba solution with weights `(alpha, 1, 1)` on `(g, m, c)`.
pub fn solve_rotation_wahba(
    world: &DirectionalTriad,
    body: &DirectionalTriad,
    alpha: f64,
) -> Result<RotationEstimate, AttitudeError> {
    solve_rotation_wahba_weighted(world, body, [alpha, 1.0, 1.0])
}

pub fn solve_rotation_wahba_weighted(
    world: &DirectionalTriad,
    body: &DirectionalTriad,
    weights: [f64; 3],
) -> Result<RotationEstimate, AttitudeError> {
    let a = world.g.into_inner() * body.g.transpose() * weights[0]
        + world.m.into_inner() * body.m.transpose() * weights[1]
        + world.c.into_inner() * body.c.transpose() * weights[2];
    let (rotation, s) = svd_rotation(&a)?;
    if s[1] <= 1e-12 * s[0].max(f64::MIN_POSITIVE) {
        return Err(AttitudeError::DegenerateSvd(s));
    }
    Ok(RotationEstimate {
        rotation,
        method: RotationMethod::WahbaSvd,
        residual: triad_residual(world, body, &rotation),
        iterations: 0,
    })
}

pub fn solve_rotation(
    world: &DirectionalTriad,
    body: &DirectionalTriad,
    method: RotationMethod,
    alpha: f64,
) -> Result<RotationEstimate, AttitudeError> {
    match method {
        RotationMethod::LinearLs => solve_rotation_linear(world, body),
        RotationMethod::TangentGn => solve_rotation_tangent(world, body, None),
        RotationMethod::WahbaSvd => solve_rotation_wahba(world, body, alpha),
    }
}

/// Everything needed to turn one GNSS epoch and a magnetometer sample into a
/// pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSolver {
    pub antennas: AntennaCalibration,
    pub magnetic_model: WorldMagneticModel,
    pub mag_intrinsics: EllipsoidCalibration,
    /// Magnetometer-to-IMU rotation.
    pub r_i_m: RotationMatrix,
    pub method: RotationMethod,
    pub alpha: f64,
    pub min_baseline: f64,
    /// Allowed time difference between the two antenna epochs.
    pub max_epoch_gap: f64,
}

impl EpochSolver {
    pub fn new(antennas: AntennaCalibration, magnetic_model: WorldMagneticModel) -> Self {
        Self {
            antennas,
            magnetic_model,
            mag_intrinsics: EllipsoidCalibration::identity(),
            r_i_m: RotationMatrix::identity(),
            method: RotationMethod::WahbaSvd,
            alpha: DEFAULT_ALPHA,
            min_baseline: DEFAULT_MIN_BASELINE,
            max_epoch_gap: 1e-6,
        }
    }

    pub fn estimate_rotation(
        &self,
        p_w_g1: &Vec3,
        p_w_g2: &Vec3,
        mag_raw: &Vec3,
    ) -> Result<RotationEstimate, AttitudeError> {
        let m_w = world_mag_vector(&self.magnetic_model);
        let world = build_world_triad(p_w_g1, p_w_g2, &m_w, self.min_baseline)?;
        let body = build_body_triad(&self.antennas, mag_raw, &self.mag_intrinsics, &self.r_i_m)?;
        solve_rotation(&world, &body, self.method, self.alpha)
    }

    /// IMU pose in the world frame at the epoch of `g2`.
    pub fn estimate_pose_epoch(
        &self,
        g1: &Timestamped<Vec3>,
        g2: &Timestamped<Vec3>,
        mag_raw: &Vec3,
    ) -> Result<(Timestamped<Pose>, RotationEstimate), AttitudeError> {
        if (g1.t - g2.t).abs() > self.max_epoch_gap {
            return Err(AttitudeError::EpochMismatch(g1.t, g2.t));
        }
        let est = self.estimate_rotation(&g1.value, &g2.value, mag_raw)?;
        let r_w_i = est.rotation;
        let r_w_vg = r_w_i * self.antennas.r_vg_i.inverse();
        let position = compose_position(
            &g2.value,
            &r_w_vg,
            &self.antennas.r_vg_i,
            &self.antennas.p_i_g2,
        );
        Ok((Timestamped::new(g2.t, Pose::new(r_w_i, position)), est))
    }
}

/// Worst-case heading error of a two-antenna baseline `b` when each antenna
/// is off by `eta` in opposite directions: `atan(2η / B)`.
pub fn worst_case_heading_error(eta: f64, baseline: f64) -> f64 {
    (2.0 * eta / baseline).atan()
}

/// Heading of the horizontal projection of a direction, radians from east
/// towards north.
pub fn horizontal_heading(v: &Vec3) -> f64 {
    v.y.atan2(v.x)
}

/// Yaw implied by a body-frame field vector for a level vehicle.
pub fn magnetic_yaw(m_body: &Vec3) -> f64 {
    -m_body.y.atan2(m_body.x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::geodesic_distance;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn rz(angle: f64) -> RotationMatrix {
        exp_so3(&Vec3::new(0.0, 0.0, angle))
    }

    fn sample_triads(rng: &mut impl Rng) -> (DirectionalTriad, DirectionalTriad, RotationMatrix) {
        let r = exp_so3(&Vec3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        ));
        let g = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let m = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let body = DirectionalTriad::new(&g, &m).unwrap();
        (body.rotated(&r), body, r)
    }

    #[test]
    fn world_mag_vector_examples() {
        let north = world_mag_vector(&WorldMagneticModel {
            declination: 0.0,
            inclination: 0.0,
            field_strength_nt: 1.0,
        });
        assert_relative_eq!(north.into_inner(), Vec3::y(), epsilon = 1e-15);
        let down = world_mag_vector(&WorldMagneticModel {
            declination: 0.0,
            inclination: FRAC_PI_2,
            field_strength_nt: 1.0,
        });
        assert_relative_eq!(down.into_inner(), -Vec3::z(), epsilon = 1e-15);
        let k = world_mag_vector(&WorldMagneticModel::klagenfurt());
        assert_relative_eq!(
            k.into_inner(),
            Vec3::new(0.0327, 0.4509, -0.8920),
            epsilon = 5e-4
        );
    }

    #[test]
    fn world_triad_examples() {
        let m = Unit::new_normalize(Vec3::y());
        let t = build_world_triad(&Vec3::new(1.2, 0.0, 0.0), &Vec3::zeros(), &m, 0.1).unwrap();
        assert_relative_eq!(t.g.into_inner(), Vec3::x());
        assert_relative_eq!(t.c.into_inner(), Vec3::z());
        assert!(matches!(
            build_world_triad(&Vec3::zeros(), &Vec3::zeros(), &m, 0.1),
            Err(AttitudeError::DegenerateBaseline(_))
        ));
        assert!(matches!(
            build_world_triad(&Vec3::new(0.0, 1.2, 0.0), &Vec3::zeros(), &m, 0.1),
            Err(AttitudeError::ParallelVectors(_))
        ));
    }

    #[test]
    fn body_triad_examples() {
        let cal = AntennaCalibration::new(
            Vec3::new(0.6, -0.6, 0.0),
            Vec3::new(-0.6, 0.6, 0.0),
            RotationMatrix::identity(),
        )
        .unwrap();
        let t = build_body_triad(
            &cal,
            &Vec3::y(),
            &EllipsoidCalibration::identity(),
            &RotationMatrix::identity(),
        )
        .unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert_relative_eq!(t.g.into_inner(), Vec3::new(s, -s, 0.0), epsilon = 1e-15);
        assert_relative_eq!(t.m.into_inner(), Vec3::y());

        assert!(build_body_triad(
            &cal,
            &Vec3::zeros(),
            &EllipsoidCalibration::identity(),
            &RotationMatrix::identity()
        )
        .is_err());

        let cal =
            AntennaCalibration::new(Vec3::x(), Vec3::zeros(), RotationMatrix::identity()).unwrap();
        let t = build_body_triad(
            &cal,
            &Vec3::y(),
            &EllipsoidCalibration::identity(),
            &RotationMatrix::identity(),
        )
        .unwrap();
        assert_eq!(t.g.into_inner(), Vec3::x());
        assert_eq!(t.m.into_inner(), Vec3::y());
        assert_eq!(t.c.into_inner(), Vec3::z());
    }

    #[test]
    fn solvers_on_identity_and_quarter_turn() {
        let body =
            DirectionalTriad::new(&Vec3::new(1.0, 0.2, 0.1), &Vec3::new(0.1, 0.4, -0.9)).unwrap();
        for method in [
            RotationMethod::LinearLs,
            RotationMethod::TangentGn,
            RotationMethod::WahbaSvd,
        ] {
            let est = solve_rotation(&body, &body, method, 50.0).unwrap();
            assert!(
                geodesic_distance(&est.rotation, &RotationMatrix::identity()) < 1e-12,
                "{method:?}"
            );
        }
        let r = rz(FRAC_PI_2);
        let world = body.rotated(&r);
        let lin = solve_rotation_linear(&world, &body).unwrap();
        assert!(geodesic_distance(&lin.rotation, &r) < 1e-12);
        let tan = solve_rotation_tangent(&world, &body, Some(Vec3::zeros())).unwrap();
        assert!(geodesic_distance(&tan.rotation, &r) < 1e-9);
        for alpha in [1.0, 50.0, 1000.0] {
            let w = solve_rotation_wahba(&world, &body, alpha).unwrap();
            assert!(geodesic_distance(&w.rotation, &r) < 1e-10);
        }
    }

    #[test]
    fn tangent_identity_needs_no_progress() {
        let body = DirectionalTriad::new(&Vec3::x(), &Vec3::y()).unwrap();
        let est = solve_rotation_tangent(&body, &body, Some(Vec3::zeros())).unwrap();
        assert!(est.iterations <= 1);
        assert_eq!(est.rotation, RotationMatrix::identity());
    }

    #[test]
    fn noiseless_random_triads_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let (world, body, r) = sample_triads(&mut rng);
            let lin = solve_rotation_linear(&world, &body).unwrap();
            assert!(geodesic_distance(&lin.rotation, &r) < 1e-10);
        }
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = 1e-6;
        for _ in 0..100 {
            let (_, body, _) = sample_triads(&mut rng);
            let w = Vec3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            let r = exp_so3(&w);
            let analytic = tangent_jacobian(&r, &body);
            for k in 0..3 {
                let mut d = Vec3::zeros();
                d[k] = h;
                let plus = tangent_prediction(&(r * exp_so3(&d)), &body);
                let minus = tangent_prediction(&(r * exp_so3(&-d)), &body);
                let fd = (plus - minus) / (2.0 * h);
                let col = analytic.column(k);
                let rel = (fd - col).norm() / col.norm().max(1e-12);
                assert!(rel < 1e-5, "rel err {rel}");
            }
        }
    }

    #[test]
    fn wahba_prefers_weighted_direction() {
        let body = DirectionalTriad::new(&Vec3::x(), &Vec3::new(0.0, 0.45, -0.89)).unwrap();
        let r = rz(0.7);
        let world = body.rotated(&r);
        // tilt the body field 5° towards g so both cannot be matched
        let m_bad = exp_so3(&(body.c.into_inner() * 5f64.to_radians())) * body.m.into_inner();
        let disturbed = DirectionalTriad::new(&body.g.into_inner(), &m_bad).unwrap();
        let est = solve_rotation_wahba(&world, &disturbed, 50.0).unwrap();
        let g_err = (est.rotation * disturbed.g.into_inner()).angle(&world.g.into_inner());
        let m_err = (est.rotation * disturbed.m.into_inner()).angle(&world.m.into_inner());
        assert!(g_err < m_err, "g {g_err} m {m_err}");
    }

    #[test]
    fn wahba_maximises_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..3 {
            let (world, body, _) = sample_triads(&mut rng);
            // noisy body so the optimum is not exact
            let noisy = DirectionalTriad::new(
                &(body.g.into_inner() + Vec3::new(0.05, 0.0, -0.02)),
                &(body.m.into_inner() + Vec3::new(0.0, 0.1, 0.03)),
            )
            .unwrap();
            let alpha = 50.0;
            let a = world.g.into_inner() * noisy.g.transpose() * alpha
                + world.m.into_inner() * noisy.m.transpose()
                + world.c.into_inner() * noisy.c.transpose();
            let best = solve_rotation_wahba(&world, &noisy, alpha)
                .unwrap()
                .rotation;
            let score = |r: &RotationMatrix| (r.matrix().transpose() * a).trace();
            let s_best = score(&best);
            for _ in 0..10_000 {
                let w = Vec3::new(
                    rng.random_range(-3.2..3.2),
                    rng.random_range(-3.2..3.2),
                    rng.random_range(-3.2..3.2),
                );
                assert!(score(&exp_so3(&w)) <= s_best + 1e-12);
            }
        }
    }

    #[test]
    fn heading_error_model() {
        assert_relative_eq!(
            worst_case_heading_error(0.01, 1.2).to_degrees(),
            0.9548,
            epsilon = 1e-4
        );
        assert_eq!(worst_case_heading_error(0.0, 1.2), 0.0);
        assert_relative_eq!(
            worst_case_heading_error(0.05, 1.0).to_degrees(),
            5.711,
            epsilon = 1e-3
        );
    }

    fn vehicle_setup() -> EpochSolver {
        let antennas = AntennaCalibration::new(
            Vec3::new(0.424, 0.424, 0.1),
            Vec3::new(-0.424, -0.424, 0.1),
            rz(0.3),
        )
        .unwrap();
        EpochSolver::new(antennas, WorldMagneticModel::klagenfurt())
    }

    fn forward(solver: &EpochSolver, pose: &Pose) -> (Vec3, Vec3, Vec3) {
        let g1 = pose.transform_point(&solver.antennas.p_i_g1);
        let g2 = pose.transform_point(&solver.antennas.p_i_g2);
        let m_w = world_mag_vector(&solver.magnetic_model).into_inner();
        let m_i = pose.rotation.inverse() * m_w;
        (g1, g2, m_i)
    }

    #[test]
    fn static_vehicle_aligned_with_enu() {
        let solver = vehicle_setup();
        let p_g2 = Vec3::new(5.0, 6.0, 7.0);
        let p_g1 = p_g2 + (solver.antennas.p_i_g1 - solver.antennas.p_i_g2);
        let m = world_mag_vector(&solver.magnetic_model).into_inner();
        let (pose, _) = solver
            .estimate_pose_epoch(
                &Timestamped::new(1.0, p_g1),
                &Timestamped::new(1.0, p_g2),
                &m,
            )
            .unwrap();
        assert!(geodesic_distance(&pose.value.rotation, &RotationMatrix::identity()) < 1e-12);
        assert_relative_eq!(
            pose.value.translation,
            p_g2 - solver.antennas.p_i_g2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn synthetic_flight_forward_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for method in [
            RotationMethod::LinearLs,
            RotationMethod::TangentGn,
            RotationMethod::WahbaSvd,
        ] {
            let mut solver = vehicle_setup();
            solver.method = method;
            for k in 0..200 {
                let pose = Pose::new(
                    exp_so3(&Vec3::new(
                        rng.random_range(-0.3..0.3),
                        rng.random_range(-0.3..0.3),
                        rng.random_range(-3.1..3.1),
                    )),
                    Vec3::new(
                        rng.random_range(-100.0..100.0),
                        rng.random_range(-100.0..100.0),
                        rng.random_range(0.0..30.0),
                    ),
                );
                let (g1, g2, m) = forward(&solver, &pose);
                let t = k as f64 * 0.1;
                let (est, _) = solver
                    .estimate_pose_epoch(&Timestamped::new(t, g1), &Timestamped::new(t, g2), &m)
                    .unwrap();
                assert!(geodesic_distance(&est.value.rotation, &pose.rotation) < 1e-9);
                assert!((est.value.translation - pose.translation).norm() < 1e-12 * 1e3);
            }
        }
    }

    #[test]
    fn disturbed_magnetometer_is_damped_by_weighting() {
        let solver = vehicle_setup();
        let pose = Pose::new(rz(0.4), Vec3::new(1.0, 2.0, 3.0));
        let (g1, g2, m) = forward(&solver, &pose);
        let disturbance = 20f64.to_radians();
        let m_bad = exp_so3(&Vec3::new(0.0, 0.0, disturbance)) * m;
        let (est, _) = solver
            .estimate_pose_epoch(
                &Timestamped::new(0.0, g1),
                &Timestamped::new(0.0, g2),
                &m_bad,
            )
            .unwrap();
        let err = geodesic_distance(&est.value.rotation, &pose.rotation);
        assert!(err < disturbance, "error {} deg", err.to_degrees());
        // the baseline direction is kept almost exactly
        let g_body = solver.antennas.p_i_g1 - solver.antennas.p_i_g2;
        let g_err = (est.value.rotation * g_body).angle(&(pose.rotation * g_body));
        assert!(g_err < 0.05 * disturbance);
    }

    #[test]
    fn pose_is_world_equivariant() {
        let solver = vehicle_setup();
        let pose = Pose::new(
            exp_so3(&Vec3::new(0.1, -0.2, 1.0)),
            Vec3::new(3.0, 1.0, 2.0),
        );
        let (g1, g2, m_i) = forward(&solver, &pose);
        let (base, _) = solver
            .estimate_pose_epoch(&Timestamped::new(0.0, g1), &Timestamped::new(0.0, g2), &m_i)
            .unwrap();
        // rotate the world about the vertical axis: field model rotates too
        let q = rz(0.8);
        let mut rotated_solver = solver;
        rotated_solver.magnetic_model.declination -= 0.8;
        let (rot, _) = rotated_solver
            .estimate_pose_epoch(
                &Timestamped::new(0.0, q * g1),
                &Timestamped::new(0.0, q * g2),
                &m_i,
            )
            .unwrap();
        assert!(geodesic_distance(&rot.value.rotation, &(q * base.value.rotation)) < 1e-10);
        assert_relative_eq!(
            rot.value.translation,
            q * base.value.translation,
            epsilon = 1e-9
        );
    }

    #[test]
    fn epoch_mismatch_is_rejected() {
        let solver = vehicle_setup();
        let r = solver.estimate_pose_epoch(
            &Timestamped::new(0.0, Vec3::x()),
            &Timestamped::new(0.5, Vec3::zeros()),
            &Vec3::y(),
        );
        assert!(matches!(r, Err(AttitudeError::EpochMismatch(..))));
    }
}
