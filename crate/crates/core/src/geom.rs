//! Quaternion / rotation / rigid-transform algebra shared by the estimator,
//! the feature pipeline and the simulator.
//!
//! Conventions used throughout the crate:
//!
//! * Quaternions store the vector part first and the scalar last, `(x, y, z, w)`,
//!   and are canonicalized to `w >= 0` after every operation.
//! * `rotation_matrix(q1 * q2) == rotation_matrix(q1) * rotation_matrix(q2)`, and
//!   for a small angle vector `d` the matrix of `UnitQuat::exp(d)` is `so3_exp(d)`.
//! * `boxplus` applies a left error: `rotation(q ⊞ d) == so3_exp(d) * rotation(q)`.
//! * A [`RigidTransform`] maps points from its local frame into its parent frame:
//!   `p_parent = R * p_local + t`.

use std::fmt;

use nalgebra::{Matrix3, Vector3};

/// Errors from geometric constructors and interpolation.
#[derive(Debug, Clone, PartialEq)]
pub enum GeomError {
    /// An input contained NaN or infinity.
    NonFinite(&'static str),
    /// A matrix that was supposed to be a rotation is not orthonormal.
    NotARotation { max_defect: f64 },
    /// Interpolation interval has zero or negative length.
    DegenerateInterval { ta: f64, tb: f64 },
    /// Interpolation query time outside `[ta, tb]`.
    OutOfRange { t: f64, ta: f64, tb: f64 },
}

impl fmt::Display for GeomError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeomError::NonFinite(what) => write!(f, "non-finite input: {what}"),
            GeomError::NotARotation { max_defect } => {
                write!(f, "matrix is not a rotation (orthonormality defect {max_defect:.3e})")
            }
            GeomError::DegenerateInterval { ta, tb } => {
                write!(f, "degenerate interpolation interval [{ta}, {tb}]")
            }
            GeomError::OutOfRange { t, ta, tb } => {
                write!(f, "interpolation time {t} outside [{ta}, {tb}]")
            }
        }
    }
}

impl std::error::Error for GeomError {}

/// Angle below which `so3_exp`/`so3_log` and friends switch to Taylor series.
const SMALL_ANGLE: f64 = 1e-7;

/// Skew-symmetric (cross-product) matrix: `skew(w) * v == w.cross(&v)`.
pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Unit quaternion in `(x, y, z, w)` order, canonicalized to `w >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuat {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
}

impl UnitQuat {
    pub fn identity() -> Self {
        UnitQuat { x: 0.0, y: 0.0, z: 0.0, w: 1.0 }
    }

    /// Builds a unit quaternion from raw components, normalizing and
    /// canonicalizing. Fails on non-finite input or a near-zero norm.
    pub fn new(x: f64, y: f64, z: f64, w: f64) -> Result<Self, GeomError> {
        if !(x.is_finite() && y.is_finite() && z.is_finite() && w.is_finite()) {
            return Err(GeomError::NonFinite("quaternion components"));
        }
        let n = (x * x + y * y + z * z + w * w).sqrt();
        if n < 1e-12 {
            return Err(GeomError::NonFinite("quaternion norm ~ 0"));
        }
        Ok(UnitQuat { x: x / n, y: y / n, z: z / n, w: w / n }.canonicalized())
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self, GeomError> {
        UnitQuat::new(a[0], a[1], a[2], a[3])
    }

    /// `[x, y, z, w]`, the serialization order.
    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.z, self.w]
    }

    fn canonicalized(self) -> Self {
        if self.w < 0.0 {
            UnitQuat { x: -self.x, y: -self.y, z: -self.z, w: -self.w }
        } else {
            self
        }
    }

    fn renormalized(self) -> Self {
        let n = (self.x * self.x + self.y * self.y + self.z * self.z + self.w * self.w).sqrt();
        UnitQuat { x: self.x / n, y: self.y / n, z: self.z / n, w: self.w / n }.canonicalized()
    }

    pub fn norm(self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z + self.w * self.w).sqrt()
    }

    /// Quaternion product, composing rotation matrices:
    /// `(a * b).to_rotation() == a.to_rotation() * b.to_rotation()`.
    pub fn mul(self, rhs: UnitQuat) -> UnitQuat {
        let (ax, ay, az, aw) = (self.x, self.y, self.z, self.w);
        let (bx, by, bz, bw) = (rhs.x, rhs.y, rhs.z, rhs.w);
        UnitQuat {
            x: aw * bx + ax * bw + ay * bz - az * by,
            y: aw * by - ax * bz + ay * bw + az * bx,
            z: aw * bz + ax * by - ay * bx + az * bw,
            w: aw * bw - ax * bx - ay * by - az * bz,
        }
        .renormalized()
    }

    pub fn conjugate(self) -> UnitQuat {
        UnitQuat { x: -self.x, y: -self.y, z: -self.z, w: self.w }.canonicalized()
    }

    /// Exponential of a rotation vector: `UnitQuat::exp(d).to_rotation() == so3_exp(d)`.
    pub fn exp(phi: &Vector3<f64>) -> UnitQuat {
        let angle = phi.norm();
        let half = 0.5 * angle;
        // sin(half)/angle, Taylor-guarded
        let k = if angle < SMALL_ANGLE {
            0.5 - angle * angle / 48.0
        } else {
            half.sin() / angle
        };
        UnitQuat { x: k * phi.x, y: k * phi.y, z: k * phi.z, w: half.cos() }.renormalized()
    }

    /// Rotation matrix of this quaternion.
    pub fn to_rotation(self) -> Rotation3 {
        let (x, y, z, w) = (self.x, self.y, self.z, self.w);
        let (x2, y2, z2) = (x * x, y * y, z * z);
        Rotation3(Matrix3::new(
            1.0 - 2.0 * (y2 + z2),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x2 + z2),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x2 + y2),
        ))
    }

    /// Inverse of [`UnitQuat::to_rotation`] (Shepperd's method, stable for all
    /// rotations including angle pi).
    pub fn from_rotation(rot: &Rotation3) -> UnitQuat {
        let m = &rot.0;
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            UnitQuat {
                w: 0.25 * s,
                x: (m[(2, 1)] - m[(1, 2)]) / s,
                y: (m[(0, 2)] - m[(2, 0)]) / s,
                z: (m[(1, 0)] - m[(0, 1)]) / s,
            }
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            UnitQuat {
                w: (m[(2, 1)] - m[(1, 2)]) / s,
                x: 0.25 * s,
                y: (m[(0, 1)] + m[(1, 0)]) / s,
                z: (m[(0, 2)] + m[(2, 0)]) / s,
            }
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            UnitQuat {
                w: (m[(0, 2)] - m[(2, 0)]) / s,
                x: (m[(0, 1)] + m[(1, 0)]) / s,
                y: 0.25 * s,
                z: (m[(1, 2)] + m[(2, 1)]) / s,
            }
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            UnitQuat {
                w: (m[(1, 0)] - m[(0, 1)]) / s,
                x: (m[(0, 2)] + m[(2, 0)]) / s,
                y: (m[(1, 2)] + m[(2, 1)]) / s,
                z: 0.25 * s,
            }
        };
        q.renormalized()
    }

    /// Left-error boxplus: the returned quaternion satisfies
    /// `result.to_rotation() == so3_exp(dtheta) * q.to_rotation()` (exact, the
    /// small-angle form `[dtheta/2; 1] ⊗ q` agrees to first order).
    pub fn boxplus(self, dtheta: &Vector3<f64>) -> Result<UnitQuat, GeomError> {
        if !(dtheta.x.is_finite() && dtheta.y.is_finite() && dtheta.z.is_finite()) {
            return Err(GeomError::NonFinite("boxplus increment"));
        }
        Ok(UnitQuat::exp(dtheta).mul(self))
    }

    /// Left-error boxminus: recovers `d` such that `other ⊞ d == self`.
    pub fn boxminus(self, other: UnitQuat) -> Vector3<f64> {
        so3_log(&(self.to_rotation() * other.to_rotation().transpose()))
    }

    /// Shortest rotation taking direction `from` onto direction `to`.
    pub fn from_two_vectors(from: &Vector3<f64>, to: &Vector3<f64>) -> UnitQuat {
        let a = from.normalize();
        let b = to.normalize();
        let c = a.dot(&b);
        if c < -1.0 + 1e-12 {
            // Antiparallel: rotate pi about any axis orthogonal to `a`.
            let axis = if a.x.abs() < 0.9 {
                Vector3::x().cross(&a).normalize()
            } else {
                Vector3::y().cross(&a).normalize()
            };
            return UnitQuat::exp(&(axis * std::f64::consts::PI));
        }
        let axis = a.cross(&b);
        let s = (2.0 * (1.0 + c)).sqrt();
        UnitQuat { x: axis.x / s, y: axis.y / s, z: axis.z / s, w: 0.5 * s }.renormalized()
    }
}

impl std::ops::Mul for UnitQuat {
    type Output = UnitQuat;
    fn mul(self, rhs: UnitQuat) -> UnitQuat {
        UnitQuat::mul(self, rhs)
    }
}

/// 3x3 rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation3(Matrix3<f64>);

impl Rotation3 {
    pub fn identity() -> Self {
        Rotation3(Matrix3::identity())
    }

    /// Wraps a matrix after checking orthonormality and determinant.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeomError> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(GeomError::NonFinite("rotation matrix entries"));
        }
        let defect = (m * m.transpose() - Matrix3::identity()).abs().max();
        let det_defect = (m.determinant() - 1.0).abs();
        let max_defect = defect.max(det_defect);
        if max_defect > 1e-6 {
            return Err(GeomError::NotARotation { max_defect });
        }
        Ok(Rotation3(m))
    }

    /// Wraps without validation; callers guarantee orthonormality.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation3(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Rotation3 {
        Rotation3(self.0.transpose())
    }

    /// Rotation about z by `yaw` radians.
    pub fn from_yaw(yaw: f64) -> Rotation3 {
        so3_exp(&Vector3::new(0.0, 0.0, yaw))
    }
}

impl std::ops::Mul for Rotation3 {
    type Output = Rotation3;
    fn mul(self, rhs: Rotation3) -> Rotation3 {
        Rotation3(self.0 * rhs.0)
    }
}

impl std::ops::Mul<Vector3<f64>> for Rotation3 {
    type Output = Vector3<f64>;
    fn mul(self, v: Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }
}

impl std::ops::Mul<&Vector3<f64>> for Rotation3 {
    type Output = Vector3<f64>;
    fn mul(self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }
}

/// SO(3) exponential map (Rodrigues), Taylor-guarded near zero.
pub fn so3_exp(phi: &Vector3<f64>) -> Rotation3 {
    let angle = phi.norm();
    let k = skew(phi);
    let (a, b) = if angle < SMALL_ANGLE {
        (1.0 - angle * angle / 6.0, 0.5 - angle * angle / 24.0)
    } else {
        (angle.sin() / angle, (1.0 - angle.cos()) / (angle * angle))
    };
    Rotation3(Matrix3::identity() + a * k + b * (k * k))
}

/// SO(3) logarithm. Near angle pi the axis sign is taken from the largest
/// diagonal element of the rotation matrix.
pub fn so3_log(rot: &Rotation3) -> Vector3<f64> {
    let m = rot.matrix();
    let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let cos_angle = (0.5 * (trace - 1.0)).clamp(-1.0, 1.0);
    let angle = cos_angle.acos();

    if angle < SMALL_ANGLE {
        // vee of the antisymmetric part, first order
        return 0.5
            * Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
    }

    if angle > std::f64::consts::PI - 1e-6 {
        // Near pi the antisymmetric part vanishes; recover the axis from
        // R + I = 2*(axis*axis^T) + O(pi - angle), picking the column with the
        // largest diagonal element and fixing the sign from it.
        let b = m + Matrix3::identity();
        let mut k = 0;
        for i in 1..3 {
            if m[(i, i)] > m[(k, k)] {
                k = i;
            }
        }
        let col = b.column(k);
        let axis = Vector3::new(col[0], col[1], col[2]).normalize();
        // Off-pi component still carried by the antisymmetric part.
        let sin_part = 0.5
            * Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
        let axis = if axis.dot(&sin_part) < 0.0 { -axis } else { axis };
        return axis * angle;
    }

    let factor = angle / (2.0 * angle.sin());
    factor * Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)])
}

/// Right Jacobian of SO(3): `so3_exp(phi + d) ≈ so3_exp(phi) * so3_exp(Jr(phi) d)`.
pub fn so3_right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let angle = phi.norm();
    let k = skew(phi);
    if angle < SMALL_ANGLE {
        return Matrix3::identity() - 0.5 * k + (1.0 / 6.0) * (k * k);
    }
    let a2 = angle * angle;
    Matrix3::identity() - ((1.0 - angle.cos()) / a2) * k
        + ((angle - angle.sin()) / (a2 * angle)) * (k * k)
}

/// Rigid transform mapping local points into the parent frame:
/// `p_parent = rotation * p_local + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Rotation3,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform { rotation: Rotation3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Rotation3, translation: Vector3<f64>) -> Self {
        RigidTransform { rotation, translation }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ rhs`: applies `rhs` first.
    pub fn compose(&self, rhs: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation * rhs.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }
}

/// Interpolates between two timestamped poses at time `t`:
/// geodesic on the rotation, linear on the translation.
pub fn pose_interpolate(
    ta_pose: &RigidTransform,
    tb_pose: &RigidTransform,
    ta: f64,
    tb: f64,
    t: f64,
) -> Result<RigidTransform, GeomError> {
    if !(tb - ta).is_finite() || tb <= ta {
        return Err(GeomError::DegenerateInterval { ta, tb });
    }
    if t < ta || t > tb {
        return Err(GeomError::OutOfRange { t, ta, tb });
    }
    let lambda = (t - ta) / (tb - ta);
    let delta = so3_log(&(tb_pose.rotation * ta_pose.rotation.transpose()));
    let rotation = so3_exp(&(lambda * delta)) * ta_pose.rotation;
    let translation = (1.0 - lambda) * ta_pose.translation + lambda * tb_pose.translation;
    Ok(RigidTransform { rotation, translation })
}
