//! Circular cone-beam geometry and 3x4 projection matrices.
//!
//! The source orbits the vertical (world y) axis through the isocenter.
//! At view angle `b` the source sits at `iso + sid (cos b, 0, sin b)`; the
//! flat detector faces it across the isocenter with its u-axis along the
//! direction of rotation and its v-axis pointing up. Lengths are mm.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4, Vector3, Vector4};
use thiserror::Error;

use crate::se3::{RigidPose, Vec3};

/// Homogeneous weights below this are treated as on or behind the source.
pub const MIN_WEIGHT: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid geometry: {0}")]
    Invalid(String),
    #[error("point {point:?} is at or behind the source plane (weight {weight})")]
    BehindSource { point: [f64; 3], weight: f64 },
    #[error("projection matrix is singular")]
    Singular,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("projection csv line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanGeometry {
    /// Source to detector distance, mm.
    pub sdd: f64,
    /// Source to isocenter distance, mm.
    pub sid: f64,
    pub cols: usize,
    pub rows: usize,
    /// Isotropic detector pixel pitch, mm.
    pub pixel_pitch: f64,
    pub n_views: usize,
    /// Angle between consecutive views, degrees.
    pub angular_step: f64,
    /// Angle of the first view, degrees.
    pub start_angle: f64,
    /// Views per second.
    pub frame_rate: f64,
    /// Rotation center in world coordinates, mm.
    pub isocenter: Vec3,
}

impl Default for ScanGeometry {
    fn default() -> Self {
        Self {
            sdd: 1198.0,
            sid: 780.0,
            cols: 620,
            rows: 480,
            pixel_pitch: 0.616,
            n_views: 248,
            angular_step: 0.8,
            start_angle: 0.0,
            frame_rate: 31.0,
            isocenter: Vec3::zeros(),
        }
    }
}

impl ScanGeometry {
    /// Half-resolution detector and half the views over the same arc and
    /// scan time; sized for a desktop run of the full experiment.
    pub fn desk() -> Self {
        Self {
            cols: 310,
            rows: 240,
            pixel_pitch: 1.232,
            n_views: 124,
            angular_step: 1.6,
            frame_rate: 15.5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: &str| Err(GeometryError::Invalid(m.to_string()));
        if !(self.sid > 0.0 && self.sdd > self.sid) {
            return bad("need sdd > sid > 0");
        }
        if !(self.pixel_pitch > 0.0) {
            return bad("pixel pitch must be positive");
        }
        if self.cols == 0 || self.rows == 0 {
            return bad("detector must have at least one pixel");
        }
        if self.n_views == 0 {
            return bad("need at least one view");
        }
        if !(self.frame_rate > 0.0) {
            return bad("frame rate must be positive");
        }
        if !(self.angular_step.is_finite() && self.start_angle.is_finite()) {
            return bad("angles must be finite");
        }
        if !self.isocenter.iter().all(|v| v.is_finite()) {
            return bad("isocenter must be finite");
        }
        Ok(())
    }

    /// View angle in radians.
    pub fn view_angle(&self, k: usize) -> f64 {
        (self.start_angle + k as f64 * self.angular_step).to_radians()
    }

    /// Acquisition instant of view `k` relative to the first view, seconds.
    pub fn view_time(&self, k: usize) -> f64 {
        k as f64 / self.frame_rate
    }

    pub fn scan_duration(&self) -> f64 {
        self.view_time(self.n_views.saturating_sub(1))
    }

    pub fn source_position(&self, k: usize) -> Vec3 {
        let b = self.view_angle(k);
        self.isocenter + Vec3::new(b.cos(), 0.0, b.sin()) * self.sid
    }

    /// Focal length in pixels.
    pub fn focal_length(&self) -> f64 {
        self.sdd / self.pixel_pitch
    }

    /// Principal point `(cu, cv)` in pixels: the detector center.
    pub fn principal_point(&self) -> (f64, f64) {
        ((self.cols as f64 - 1.0) * 0.5, (self.rows as f64 - 1.0) * 0.5)
    }

    /// Intrinsic matrix `K`.
    pub fn intrinsics(&self) -> Matrix3<f64> {
        let f = self.focal_length();
        let (cu, cv) = self.principal_point();
        Matrix3::new(f, 0.0, cu, 0.0, f, cv, 0.0, 0.0, 1.0)
    }

    /// World-to-camera rotation of view `k`; rows are the detector u-axis,
    /// the v-axis (world up) and the viewing direction.
    pub fn camera_rotation(&self, k: usize) -> Matrix3<f64> {
        let b = self.view_angle(k);
        let (s, c) = b.sin_cos();
        Matrix3::new(-s, 0.0, c, 0.0, 1.0, 0.0, -c, 0.0, -s)
    }

    /// Detector pixel `(u, v)` to physical offset from the principal point,
    /// mm, in the detector plane.
    pub fn pixel_to_mm(&self, u: f64, v: f64) -> (f64, f64) {
        let (cu, cv) = self.principal_point();
        ((u - cu) * self.pixel_pitch, (v - cv) * self.pixel_pitch)
    }
}

/// 3x4 projection matrix, scaled so that the third row of its left 3x3
/// block has unit norm and points at the scene. The homogeneous weight of a
/// point is then its depth along the viewing direction, mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionMatrix(Matrix3x4<f64>);

impl ProjectionMatrix {
    /// Normalizes an arbitrary-scale matrix; `reference` must lie in front
    /// of the source (its weight fixes the sign).
    pub fn from_matrix(m: Matrix3x4<f64>, reference: &Vec3) -> Result<Self, GeometryError> {
        let block = m.fixed_view::<3, 3>(0, 0).into_owned();
        if block.determinant().abs() < 1e-300 {
            return Err(GeometryError::Singular);
        }
        let norm = m.fixed_view::<1, 3>(2, 0).norm();
        let mut p = m / norm;
        let w = (p * reference.push(1.0))[2];
        if w < 0.0 {
            p = -p;
        }
        Ok(Self(p))
    }

    /// Wraps a matrix that is already normalized.
    pub fn from_matrix_unchecked(m: Matrix3x4<f64>) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix3x4<f64> {
        &self.0
    }

    pub fn to_row_major_12(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..4 {
                out[r * 4 + c] = self.0[(r, c)];
            }
        }
        out
    }

    /// Homogeneous image of `x`.
    pub fn apply(&self, x: &Vec3) -> Vector3<f64> {
        self.0 * Vector4::new(x.x, x.y, x.z, 1.0)
    }

    /// Depth (homogeneous weight) of `x`.
    pub fn weight(&self, x: &Vec3) -> f64 {
        let m = &self.0;
        m[(2, 0)] * x.x + m[(2, 1)] * x.y + m[(2, 2)] * x.z + m[(2, 3)]
    }

    pub fn project(&self, x: &Vec3) -> Result<(f64, f64), GeometryError> {
        let h = self.apply(x);
        if h.z < MIN_WEIGHT {
            return Err(GeometryError::BehindSource {
                point: [x.x, x.y, x.z],
                weight: h.z,
            });
        }
        Ok((h.x / h.z, h.y / h.z))
    }

    fn block_inverse(&self) -> Matrix3<f64> {
        self.0
            .fixed_view::<3, 3>(0, 0)
            .into_owned()
            .try_inverse()
            .expect("projection block has full rank")
    }

    /// Camera center `C` with `P (C, 1) = 0`.
    pub fn source(&self) -> Vec3 {
        -(self.block_inverse() * self.0.column(3))
    }

    /// Unnormalized direction of the ray through pixel `(u, v)`, scaled so
    /// that a unit step along it increases the depth by one mm.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vec3 {
        self.block_inverse() * Vec3::new(u, v, 1.0)
    }

    /// Same projection with the object moved by `motion`: `P M`.
    pub fn apply_motion(&self, motion: &RigidPose) -> Self {
        apply_motion(self, motion)
    }
}

/// `P_k M_k`; `M_k` maps view-0 object coordinates to their moved position
/// at view `k`, so the result projects reference coordinates onto where the
/// moved object was imaged.
pub fn apply_motion(p: &ProjectionMatrix, motion: &RigidPose) -> ProjectionMatrix {
    ProjectionMatrix(p.0 * motion.to_matrix())
}

pub fn project_point(p: &ProjectionMatrix, x: &Vec3) -> Result<(f64, f64), GeometryError> {
    p.project(x)
}

/// Projection matrix of view `k`: `K [R | -R s]`.
pub fn view_matrix(geom: &ScanGeometry, k: usize) -> ProjectionMatrix {
    let r = geom.camera_rotation(k);
    let t = -(r * geom.source_position(k));
    let mut ext = Matrix3x4::zeros();
    ext.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    ext.set_column(3, &t);
    // K has unit third row and R is orthonormal, so the result is normalized
    ProjectionMatrix(geom.intrinsics() * ext)
}

pub fn build_trajectory(geom: &ScanGeometry) -> Result<Vec<ProjectionMatrix>, GeometryError> {
    geom.validate()?;
    Ok((0..geom.n_views).map(|k| view_matrix(geom, k)).collect())
}

/// One row of 12 row-major entries per view.
pub fn projections_to_csv(mats: &[ProjectionMatrix]) -> String {
    let mut out = String::from("view");
    for r in 0..3 {
        for c in 0..4 {
            let _ = write!(out, ",p{r}{c}");
        }
    }
    out.push('\n');
    for (k, p) in mats.iter().enumerate() {
        let _ = write!(out, "{k}");
        for v in p.to_row_major_12() {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_projections_csv(text: &str) -> Result<Vec<ProjectionMatrix>, GeometryError> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .skip(1)
            .map(|c| c.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| GeometryError::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
        if vals.len() != 12 {
            return Err(GeometryError::Parse {
                line: idx + 1,
                message: format!("expected 12 entries, found {}", vals.len()),
            });
        }
        out.push(ProjectionMatrix(Matrix3x4::from_row_slice(&vals)));
    }
    Ok(out)
}

pub fn save_projections_csv(mats: &[ProjectionMatrix], path: &Path) -> Result<(), GeometryError> {
    std::fs::write(path, projections_to_csv(mats)).map_err(|source| GeometryError::Io {
        path: path.display().to_string(),
        source,
    })
}
