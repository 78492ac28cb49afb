//! SO(3) and rigid-body primitives shared by every estimator in the crate.
//!
//! Rotations are stored as plain `Rotation3<f64>` matrices. The exponential
//! and logarithm maps are written out explicitly (Rodrigues form) so that the
//! near-π branch of the logarithm is under our control.

use nalgebra::{Matrix3, Rotation3, SVector, Unit, UnitQuaternion, Vector3};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type UnitVec3 = Unit<Vector3<f64>>;
pub type RotationMatrix = Rotation3<f64>;
/// Axis-angle coordinates of a rotation, in radians.
pub type TangentVector = Vector3<f64>;

/// Orthonormality and determinant tolerance of a valid rotation matrix.
pub const ROTATION_TOLERANCE: f64 = 1e-9;
/// Smallest singular value accepted by [`project_to_so3`].
pub const MIN_SINGULAR_VALUE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("matrix is degenerate (smallest singular value {0:e})")]
    Degenerate(f64),
    #[error("matrix contains non-finite entries")]
    NonFinite,
}

/// A value tagged with a time in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timestamped<T> {
    pub t: f64,
    pub value: T,
}

impl<T> Timestamped<T> {
    pub fn new(t: f64, value: T) -> Self {
        Self { t, value }
    }
}

/// Strictly increasing sequence of timestamped samples.
pub type TimeSeries<T> = Vec<Timestamped<T>>;

/// Index of the first sample whose timestamp does not exceed its predecessor.
pub fn first_non_monotonic<T>(series: &[Timestamped<T>]) -> Option<usize> {
    series
        .windows(2)
        .position(|w| !(w[1].t > w[0].t))
        .map(|i| i + 1)
}

/// Rigid transform. As `T_a_b` it maps coordinates in frame `b` to frame `a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: RotationMatrix,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: RotationMatrix, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(RotationMatrix::identity(), Vec3::zeros())
    }

    pub fn inverse(&self) -> Self {
        let r_inv = self.rotation.inverse();
        Self::new(r_inv, -(r_inv * self.translation))
    }

    /// `self ∘ other`
    pub fn compose(&self, other: &Pose) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Unit quaternion `(w, x, y, z)` with `w ≥ 0`.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        rotation_to_quaternion_wxyz(&self.rotation)
    }

    pub fn from_quaternion_wxyz(q: [f64; 4], translation: Vec3) -> Self {
        Self::new(quaternion_wxyz_to_rotation(q), translation)
    }
}

/// Cross-product matrix: `skew(v) * w == v.cross(&w)`.
pub fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues exponential map.
pub fn exp_so3(omega: &TangentVector) -> RotationMatrix {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(omega);
    // Taylor expansions below the threshold keep full precision near zero.
    let (a, b) = if theta < 1e-5 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    RotationMatrix::from_matrix_unchecked(Matrix3::identity() + k * a + k * k * b)
}

/// Logarithm map, canonicalised to `‖ω‖ ≤ π`.
pub fn log_so3(r: &RotationMatrix) -> TangentVector {
    let m = r.matrix();
    let cos_theta = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let vee = Vec3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    );

    if cos_theta > 1.0 - 1e-10 {
        // sin θ / θ ≈ 1 - θ²/6
        let theta2 = 2.0 * (1.0 - cos_theta);
        return vee * (0.5 / (1.0 - theta2 / 6.0));
    }

    if cos_theta > -0.99 {
        let theta = cos_theta.acos();
        return vee * (theta / (2.0 * theta.sin()));
    }

    // Near π the antisymmetric part vanishes; recover the axis from the
    // symmetric part using its largest diagonal element.
    let sin_theta = 0.5 * vee.norm();
    let theta = sin_theta.atan2(cos_theta);
    let b = (m + m.transpose()) * 0.5 - Matrix3::identity() * cos_theta;
    let one_minus_cos = 1.0 - cos_theta;
    let i = (0..3)
        .max_by(|&a, &c| b[(a, a)].partial_cmp(&b[(c, c)]).unwrap())
        .unwrap();
    let mut axis = Vec3::zeros();
    axis[i] = (b[(i, i)] / one_minus_cos).max(0.0).sqrt();
    for j in 0..3 {
        if j != i {
            axis[j] = b[(i, j)] / (one_minus_cos * axis[i]);
        }
    }
    axis.normalize_mut();
    // Pick the sign consistent with the antisymmetric part.
    if axis.dot(&vee) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Angle of the relative rotation `r1ᵀ r2`, in radians.
pub fn geodesic_distance(r1: &RotationMatrix, r2: &RotationMatrix) -> f64 {
    log_so3(&(r1.inverse() * r2)).norm()
}

/// Rotation `U diag(1, 1, det(U)det(V)) Vᵀ` from the SVD of `m`, which
/// maximises `trace(Rᵀ m)` over SO(3). Returns the rotation and the singular
/// values sorted in descending order.
pub(crate) fn svd_rotation(m: &Matrix3<f64>) -> Result<(RotationMatrix, [f64; 3]), GeometryError> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd computed with u");
    let v_t = svd.v_t.expect("svd computed with v_t");
    let s = svd.singular_values;

    // The determinant correction belongs to the smallest singular value.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap());
    let d = (u.determinant() * v_t.determinant()).signum();
    let mut diag = Vector3::new(1.0, 1.0, 1.0);
    diag[order[2]] = d;
    let r = u * Matrix3::from_diagonal(&diag) * v_t;
    Ok((
        RotationMatrix::from_matrix_unchecked(r),
        [s[order[0]], s[order[1]], s[order[2]]],
    ))
}

/// Nearest rotation in Frobenius norm.
pub fn project_to_so3(m: &Matrix3<f64>) -> Result<RotationMatrix, GeometryError> {
    let (r, s) = svd_rotation(m)?;
    if s[2] < MIN_SINGULAR_VALUE {
        return Err(GeometryError::Degenerate(s[2]));
    }
    Ok(r)
}

/// IMU position in the world frame with antenna G2 as the origin of the
/// virtual GNSS frame: `p_W_G2 + R_W_VG · R_VG_I · (−p_I_G2)`.
pub fn compose_position(
    p_w_g2: &Vec3,
    r_w_vg: &RotationMatrix,
    r_vg_i: &RotationMatrix,
    p_i_g2: &Vec3,
) -> Vec3 {
    p_w_g2 + r_w_vg * (r_vg_i * (-p_i_g2))
}

pub fn is_rotation(m: &Matrix3<f64>, tol: f64) -> bool {
    let err = m.transpose() * m - Matrix3::identity();
    err.iter().all(|e| e.abs() <= tol) && (m.determinant() - 1.0).abs() <= tol
}

/// Chordal L2 mean: projection of the summed rotation matrices onto SO(3).
pub fn chordal_mean<'a, I>(rotations: I) -> Result<RotationMatrix, GeometryError>
where
    I: IntoIterator<Item = &'a RotationMatrix>,
{
    let sum = rotations
        .into_iter()
        .fold(Matrix3::zeros(), |acc, r| acc + r.matrix());
    project_to_so3(&sum)
}

pub fn rotation_to_quaternion_wxyz(r: &RotationMatrix) -> [f64; 4] {
    let q = UnitQuaternion::from_rotation_matrix(r);
    let q = q.quaternion();
    let s = if q.w < 0.0 { -1.0 } else { 1.0 };
    [s * q.w, s * q.i, s * q.j, s * q.k]
}

pub fn quaternion_wxyz_to_rotation(q: [f64; 4]) -> RotationMatrix {
    let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
    q.to_rotation_matrix()
}

/// Weiszfeld iteration for the point minimising the summed Euclidean distance
/// to `points`. Returns `None` for an empty set.
pub fn geometric_median<const N: usize>(
    points: &[SVector<f64, N>],
    tol: f64,
    max_iter: usize,
) -> Option<SVector<f64, N>> {
    if points.is_empty() {
        return None;
    }
    let n = points.len() as f64;
    let mut y = points.iter().fold(SVector::<f64, N>::zeros(), |a, p| a + p) / n;

    for _ in 0..max_iter {
        let mut num = SVector::<f64, N>::zeros();
        let mut den = 0.0;
        let mut pull = SVector::<f64, N>::zeros();
        let mut coincident = 0usize;
        for p in points {
            let d = (p - y).norm();
            if d < 1e-15 {
                coincident += 1;
                continue;
            }
            num += p / d;
            den += 1.0 / d;
            pull += (p - y) / d;
        }
        if den == 0.0 {
            return Some(y);
        }
        let t = num / den;
        // Vardi-Zhang step when the iterate sits on a sample point.
        let next = if coincident > 0 {
            let r = pull.norm();
            if r <= coincident as f64 {
                return Some(y);
            }
            let eta = coincident as f64 / r;
            t * (1.0 - eta) + y * eta
        } else {
            t
        };
        let step = (next - y).norm();
        y = next;
        if step < tol {
            break;
        }
    }
    Some(y)
}
