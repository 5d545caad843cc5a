//! Marker-based baseline: per-view rigid motion from fiducial detections by
//! Gauss-Newton on the reprojection error.
//!
//! All markers share one rigid pose. Each view is solved on its own, warm
//! started from the previous view; view 0 is the reference and is fixed to
//! the identity.

use nalgebra::{Matrix3, SMatrix, SVector};
use thiserror::Error;

use crate::geometry::{GeometryError, ProjectionMatrix};
use crate::moco::MotionTrack;
use crate::se3::{skew, RigidPose, Rotation3, Vec3};

pub const MIN_VISIBLE_MARKERS: usize = 6;
/// Reference sets whose points all lie within this distance (mm) of one
/// plane are rejected.
pub const COPLANAR_TOLERANCE: f64 = 1.0;

type Mat6 = SMatrix<f64, 6, 6>;
type Vec6 = SVector<f64, 6>;

#[derive(Debug, Error)]
pub enum MarkerBaseError {
    #[error("view {view}: {visible} markers visible, need at least {MIN_VISIBLE_MARKERS}")]
    InsufficientMarkers { view: usize, visible: usize },
    #[error("reference markers are coplanar within {COPLANAR_TOLERANCE} mm")]
    Coplanar,
    #[error("{what}: expected {expected}, got {got}")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("view {view} did not converge (residual {residual_px:.4} px after {iterations} iterations)")]
    NotConverged {
        view: usize,
        residual_px: f64,
        iterations: usize,
    },
    #[error("view {view}: normal matrix is singular")]
    Singular { view: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussNewtonOptions {
    pub max_iterations: usize,
    /// Stop once the parameter step (mm, rotation scaled by marker radius)
    /// falls below this.
    pub step_tolerance: f64,
    pub max_halvings: usize,
    /// Hitting the iteration cap with a last step larger than this is a
    /// convergence failure.
    pub failure_step: f64,
}

impl Default for GaussNewtonOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            step_tolerance: 1e-10,
            max_halvings: 10,
            failure_step: 1e-6,
        }
    }
}

/// Result of one single-view fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewFit {
    pub pose: RigidPose,
    pub residual_rms: f64,
    pub iterations: usize,
    /// Condition number of the normal matrix at the solution.
    pub condition: f64,
    /// Objective after each accepted iterate, starting with the initial one.
    pub objective_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    /// `M_k`, with `M_0` the identity.
    pub motion: Vec<RigidPose>,
    /// Reprojection RMS per view, px (per coordinate).
    pub residual_rms: Vec<f64>,
    pub iterations: Vec<usize>,
    pub condition: Vec<f64>,
}

impl PoseEstimate {
    /// Same layout as an IMU-derived track so the reconstructor treats both
    /// alike. There is no sensor, so the sensor poses repeat the motion.
    pub fn to_track(&self, times: &[f64]) -> MotionTrack {
        MotionTrack {
            times: times.to_vec(),
            sensor_poses: self.motion.clone(),
            motion: self.motion.clone(),
        }
    }
}

/// Rejects reference sets without 3D extent.
pub fn check_reference(reference: &[Vec3]) -> Result<(), MarkerBaseError> {
    if reference.len() < MIN_VISIBLE_MARKERS {
        return Err(MarkerBaseError::InsufficientMarkers {
            view: 0,
            visible: reference.len(),
        });
    }
    let c = reference.iter().sum::<Vec3>() / reference.len() as f64;
    let cov: Matrix3<f64> = reference.iter().map(|x| (x - c) * (x - c).transpose()).sum();
    let eig = cov.symmetric_eigen();
    let i = eig.eigenvalues.imin();
    let normal = eig.eigenvectors.column(i).into_owned();
    let spread = reference.iter().map(|x| (x - c).dot(&normal).abs()).fold(0.0, f64::max);
    if spread < COPLANAR_TOLERANCE {
        return Err(MarkerBaseError::Coplanar);
    }
    Ok(())
}

struct Problem<'a> {
    p: &'a ProjectionMatrix,
    points: Vec<Vec3>,
    observed: Vec<(f64, f64)>,
}

impl Problem<'_> {
    fn residuals(&self, pose: &RigidPose) -> Option<Vec<f64>> {
        let mut r = Vec::with_capacity(2 * self.points.len());
        for (x, &(u, v)) in self.points.iter().zip(&self.observed) {
            let (pu, pv) = self.p.project(&pose.transform_point(x)).ok()?;
            r.push(pu - u);
            r.push(pv - v);
        }
        Some(r)
    }

    fn objective(&self, pose: &RigidPose) -> f64 {
        self.residuals(pose)
            .map(|r| r.iter().map(|e| e * e).sum())
            .unwrap_or(f64::INFINITY)
    }
}

/// Applies the scaled local step: rotation `w / radius` about `center`, then
/// translation `t`, on the left of `pose`.
fn perturb(pose: &RigidPose, step: &Vec6, center: &Vec3, radius: f64) -> RigidPose {
    let w = Vec3::new(step[0], step[1], step[2]) / radius;
    let t = Vec3::new(step[3], step[4], step[5]);
    let r = Rotation3::exp(&w);
    let about = RigidPose::new(r, center - r.apply(center) + t);
    about.compose(pose)
}

/// Fits one view's pose to its detections. `reference` and `detections`
/// are index-aligned; non-finite detections count as not visible.
pub fn estimate_view(
    p: &ProjectionMatrix,
    reference: &[Vec3],
    detections: &[(f64, f64)],
    initial: &RigidPose,
    options: &GaussNewtonOptions,
    view: usize,
) -> Result<ViewFit, MarkerBaseError> {
    if reference.len() != detections.len() {
        return Err(MarkerBaseError::CountMismatch {
            what: "detections",
            expected: reference.len(),
            got: detections.len(),
        });
    }
    let (points, observed): (Vec<Vec3>, Vec<(f64, f64)>) = reference
        .iter()
        .zip(detections)
        .filter(|(_, d)| d.0.is_finite() && d.1.is_finite())
        .map(|(x, d)| (*x, *d))
        .unzip();
    if points.len() < MIN_VISIBLE_MARKERS {
        return Err(MarkerBaseError::InsufficientMarkers {
            view,
            visible: points.len(),
        });
    }
    let problem = Problem { p, points, observed };
    let m = p.matrix();
    let mut pose = *initial;
    let mut f = problem.objective(&pose);
    let mut history = vec![f];
    let mut iterations = 0;
    let mut last_step = f64::INFINITY;
    let mut condition = f64::NAN;
    let mut stalled = false;

    while iterations < options.max_iterations {
        let moved: Vec<Vec3> = problem.points.iter().map(|x| pose.transform_point(x)).collect();
        let center = moved.iter().sum::<Vec3>() / moved.len() as f64;
        let radius = (moved.iter().map(|y| (y - center).norm_squared()).sum::<f64>() / moved.len() as f64)
            .sqrt()
            .max(1e-9);
        let mut jtj = Mat6::zeros();
        let mut jtr = Vec6::zeros();
        for (y, &(u, v)) in moved.iter().zip(&problem.observed) {
            let h = p.apply(y);
            let (pu, pv) = (h.x / h.z, h.y / h.z);
            // d(u, v)/dy
            let mut dproj = SMatrix::<f64, 2, 3>::zeros();
            for c in 0..3 {
                dproj[(0, c)] = (m[(0, c)] - pu * m[(2, c)]) / h.z;
                dproj[(1, c)] = (m[(1, c)] - pv * m[(2, c)]) / h.z;
            }
            // dy/d(step): rotation -[y - c]x / radius, translation I
            let mut dy = SMatrix::<f64, 3, 6>::zeros();
            dy.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&(y - center)) / radius));
            dy.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
            let j = dproj * dy;
            let r = nalgebra::Vector2::new(pu - u, pv - v);
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        let eig = jtj.symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        let Some(chol) = jtj.cholesky() else {
            return Err(MarkerBaseError::Singular { view });
        };
        let step = -chol.solve(&jtr);
        iterations += 1;

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=options.max_halvings {
            let candidate = perturb(&pose, &(step * scale), &center, radius);
            let fc = problem.objective(&candidate);
            if fc <= f {
                accepted = Some((candidate, fc));
                break;
            }
            scale *= 0.5;
        }
        let Some((next, fn_)) = accepted else {
            // no descent along the Gauss-Newton direction: at the minimum
            // to working precision
            stalled = true;
            break;
        };
        pose = next.renormalized();
        f = fn_.min(problem.objective(&pose));
        history.push(f);
        last_step = step.norm() * scale;
        if last_step < options.step_tolerance {
            break;
        }
    }
    let residual_rms = (f / (2 * problem.points.len()) as f64).sqrt();
    if !stalled && last_step >= options.step_tolerance && last_step > options.failure_step {
        return Err(MarkerBaseError::NotConverged {
            view,
            residual_px: residual_rms,
            iterations,
        });
    }
    Ok(ViewFit {
        pose,
        residual_rms,
        iterations,
        condition,
        objective_history: history,
    })
}

/// Reprojection RMS (px per coordinate) of `pose` over the visible markers.
pub fn reprojection_rms(
    p: &ProjectionMatrix,
    reference: &[Vec3],
    detections: &[(f64, f64)],
    pose: &RigidPose,
) -> Result<f64, MarkerBaseError> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (x, &(u, v)) in reference.iter().zip(detections) {
        if !(u.is_finite() && v.is_finite()) {
            continue;
        }
        let (pu, pv) = p.project(&pose.transform_point(x))?;
        sum += (pu - u).powi(2) + (pv - v).powi(2);
        n += 2;
    }
    if n == 0 {
        return Ok(0.0);
    }
    Ok((sum / n as f64).sqrt())
}

/// Per-view motion for a scan. `reference` holds marker positions in the
/// view-0 frame (mm); `detections[k][j]` is marker `j` in view `k` (px).
pub fn estimate_motion(
    detections: &[Vec<(f64, f64)>],
    reference: &[Vec3],
    matrices: &[ProjectionMatrix],
    options: &GaussNewtonOptions,
) -> Result<PoseEstimate, MarkerBaseError> {
    if detections.len() != matrices.len() {
        return Err(MarkerBaseError::CountMismatch {
            what: "views",
            expected: matrices.len(),
            got: detections.len(),
        });
    }
    check_reference(reference)?;
    let n = matrices.len();
    let mut out = PoseEstimate {
        motion: Vec::with_capacity(n),
        residual_rms: Vec::with_capacity(n),
        iterations: Vec::with_capacity(n),
        condition: Vec::with_capacity(n),
    };
    let mut pose = RigidPose::identity();
    for (k, (p, det)) in matrices.iter().zip(detections).enumerate() {
        if k == 0 {
            // the reference view defines the frame; only its residual is kept
            out.motion.push(RigidPose::identity());
            out.residual_rms.push(reprojection_rms(p, reference, det, &pose)?);
            out.iterations.push(0);
            out.condition.push(f64::NAN);
            continue;
        }
        let fit = estimate_view(p, reference, det, &pose, options, k)?;
        pose = fit.pose;
        out.motion.push(fit.pose);
        out.residual_rms.push(fit.residual_rms);
        out.iterations.push(fit.iterations);
        out.condition.push(fit.condition);
    }
    Ok(out)
}
