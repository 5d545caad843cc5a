//! Rigid transforms and small-matrix helpers.
//!
//! Rotations are explicit 3x3 matrices. Poses are rotation + translation and
//! act on points as `x -> R x + t`, i.e. the 4x4 affine matrix
//! `[R t; 0 1]`. Composition follows matrix multiplication order:
//! `a.compose(&b)` applies `b` first, then `a`.

use nalgebra::{Matrix3, Matrix4, Vector3};
use thiserror::Error;

/// Three-component vector; units are declared by the caller.
pub type Vec3 = Vector3<f64>;

/// Number of chained compositions after which long products are re-orthonormalized.
pub const RENORMALIZE_EVERY: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Se3Error {
    #[error("matrix is not antisymmetric (max |M + M^T|/2 = {asymmetry:e})")]
    NotAntisymmetric { asymmetry: f64 },
    #[error("zero rotation axis with non-zero angle {angle}")]
    ZeroAxis { angle: f64 },
}

/// Skew-symmetric cross-product matrix, `skew(w) * v == w x v`.
pub fn skew(w: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Tolerance on the antisymmetric residual accepted by [`unskew`].
pub const UNSKEW_TOLERANCE: f64 = 1e-6;

/// Inverse of [`skew`]. The input is symmetrized first; residual symmetric
/// parts larger than [`UNSKEW_TOLERANCE`] are rejected.
pub fn unskew(m: &Matrix3<f64>) -> Result<Vec3, Se3Error> {
    let sym = (m + m.transpose()) * 0.5;
    let asymmetry = sym.amax();
    if asymmetry > UNSKEW_TOLERANCE {
        return Err(Se3Error::NotAntisymmetric { asymmetry });
    }
    Ok(unskew_unchecked(m))
}

/// Antisymmetric part of `m` read out as a vector, without validation.
pub(crate) fn unskew_unchecked(m: &Matrix3<f64>) -> Vec3 {
    Vec3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// A proper rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation3(Matrix3<f64>);

impl Default for Rotation3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation3 {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Wraps a matrix that is already orthonormal. Small drift is removed.
    pub fn from_matrix(m: Matrix3<f64>) -> Self {
        Self(m).renormalized()
    }

    /// Wraps a matrix without checking or projecting it.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    /// Rodrigues rotation about `axis` (normalized internally) by `angle` radians.
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Result<Self, Se3Error> {
        if angle == 0.0 {
            return Ok(Self::identity());
        }
        let n = axis.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Se3Error::ZeroAxis { angle });
        }
        let k = skew(&(axis / n));
        let m = Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos());
        Ok(Self(m))
    }

    /// Rotation by the rotation vector `v` (axis * angle). Zero maps to identity.
    pub fn exp(v: &Vec3) -> Self {
        let angle = v.norm();
        if angle == 0.0 {
            return Self::identity();
        }
        Self::from_axis_angle(v, angle).expect("non-zero axis")
    }

    /// Rotation vector of this rotation (principal branch, angle in [0, pi]).
    pub fn log(&self) -> Vec3 {
        let m = &self.0;
        let w = unskew_unchecked(m);
        let angle = self.angle();
        if angle < 1e-6 {
            // sin(a)/a ~ 1 - a^2/6
            return w * (1.0 + angle * angle / 6.0);
        }
        if std::f64::consts::PI - angle < 1e-6 {
            // near pi: axis from the symmetric part
            let b = (m + Matrix3::identity()) * 0.5;
            let (col, _) = (0..3)
                .map(|j| (j, b[(j, j)]))
                .fold((0, f64::MIN), |acc, x| if x.1 > acc.1 { x } else { acc });
            let mut axis = b.column(col).into_owned();
            axis /= axis.norm();
            if axis.dot(&w) < 0.0 {
                axis = -axis;
            }
            return axis * angle;
        }
        w * (angle / angle.sin())
    }

    /// Intrinsic X-Y-Z Euler angles: `Rx(a) * Ry(b) * Rz(c)`.
    pub fn from_euler_xyz(a: f64, b: f64, c: f64) -> Self {
        Self(rot_x(a) * rot_y(b) * rot_z(c))
    }

    pub fn about_x(angle: f64) -> Self {
        Self(rot_x(angle))
    }

    pub fn about_y(angle: f64) -> Self {
        Self(rot_y(angle))
    }

    pub fn about_z(angle: f64) -> Self {
        Self(rot_z(angle))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    pub fn compose(&self, other: &Self) -> Self {
        Self(self.0 * other.0)
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    pub fn angle(&self) -> f64 {
        // atan2 keeps full precision at small angles, unlike acos
        let s = unskew_unchecked(&self.0).norm();
        s.atan2((self.0.trace() - 1.0) * 0.5)
    }

    /// Angle of `self^T * other`.
    pub fn angle_to(&self, other: &Self) -> f64 {
        self.transpose().compose(other).angle()
    }

    /// Nearest rotation in the Frobenius sense (polar decomposition).
    pub fn renormalized(&self) -> Self {
        let svd = self.0.svd(true, true);
        let u = svd.u.expect("u requested");
        let v_t = svd.v_t.expect("v_t requested");
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * v_t;
        }
        Self(r)
    }

    /// Largest entry of `|R^T R - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).amax()
    }
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RigidPose {
    pub rotation: Rotation3,
    pub translation: Vec3,
}

impl RigidPose {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Rotation3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(Rotation3::identity(), t)
    }

    pub fn from_rotation(r: Rotation3) -> Self {
        Self::new(r, Vec3::zeros())
    }

    /// `self * other` as 4x4 matrices.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.apply(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -rt.apply(&self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.apply(p) + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation.apply(v)
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Reads the upper 3x4 block; the bottom row is ignored.
    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        Self {
            rotation: Rotation3::from_matrix(m.fixed_view::<3, 3>(0, 0).into_owned()),
            translation: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    /// The 12 entries of the upper 3x4 block, row-major.
    pub fn to_row_major_12(&self) -> [f64; 12] {
        let r = self.rotation.matrix();
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ]
    }

    pub fn from_row_major_12(v: &[f64; 12]) -> Self {
        let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        Self {
            rotation: Rotation3::from_matrix(r),
            translation: Vec3::new(v[3], v[7], v[11]),
        }
    }

    /// Same rotation, translation multiplied by `factor` (unit change).
    pub fn scale_translation(&self, factor: f64) -> Self {
        Self::new(self.rotation, self.translation * factor)
    }

    pub fn renormalized(&self) -> Self {
        Self::new(self.rotation.renormalized(), self.translation)
    }

    /// (translation distance, rotation angle) between two poses.
    pub fn distance_to(&self, other: &Self) -> (f64, f64) {
        (
            (self.translation - other.translation).norm(),
            self.rotation.angle_to(&other.rotation),
        )
    }
}

/// Free-function form of [`Rotation3::from_axis_angle`].
pub fn rotation_from_axis_angle(axis: &Vec3, angle: f64) -> Result<Rotation3, Se3Error> {
    Rotation3::from_axis_angle(axis, angle)
}

/// Free-function form of [`RigidPose::compose`].
pub fn compose(a: &RigidPose, b: &RigidPose) -> RigidPose {
    a.compose(b)
}
