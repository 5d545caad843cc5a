//! FDK-style filtered backprojection with arbitrary per-view projection
//! matrices.
//!
//! Chain: cosine preweighting, Parker redundancy weights for the short scan,
//! row-wise Ram-Lak filtering, and voxel-driven backprojection with bilinear
//! detector sampling and the `(sid / depth)^2` distance weight.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::geometry::{apply_motion, build_trajectory, GeometryError, ProjectionMatrix, ScanGeometry};
use crate::io::{self, IoError, Meta};
use crate::moco::MotionTrack;
use crate::projector::{meta_path, ProjectionStack};
use crate::se3::Vec3;

#[derive(Debug, Error)]
pub enum ReconError {
    #[error("{what}: expected {expected}, got {got}")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("angular coverage {coverage_deg:.2} deg is too short for a fan half-angle of {fan_deg:.2} deg")]
    InsufficientCoverage { coverage_deg: f64, fan_deg: f64 },
    #[error("first motion matrix must be the identity")]
    MotionNotAnchored,
    #[error("detector rows must have at least two pixels")]
    RowTooShort,
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Voxel grid: `dims = [nx, ny, nz]`, x fastest. `origin` is the world
/// position of voxel (0, 0, 0)'s center, mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeSpec {
    pub dims: [usize; 3],
    pub spacing: f64,
    pub origin: Vec3,
}

impl VolumeSpec {
    /// Cubic grid of `n` voxels per side centered on `center`.
    pub fn centered(n: usize, spacing: f64, center: Vec3) -> Self {
        let half = (n as f64 - 1.0) * 0.5 * spacing;
        Self {
            dims: [n, n, n],
            spacing,
            origin: center - Vec3::repeat(half),
        }
    }

    pub fn validate(&self) -> Result<(), ReconError> {
        if self.dims.contains(&0) {
            return Err(ReconError::InvalidVolume("zero dimension".into()));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(ReconError::InvalidVolume("spacing must be positive".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    pub fn position(&self, x: usize, y: usize, z: usize) -> Vec3 {
        self.origin + Vec3::new(x as f64, y as f64, z as f64) * self.spacing
    }

    pub fn center(&self) -> Vec3 {
        self.origin + Vec3::new(self.dims[0] as f64 - 1.0, self.dims[1] as f64 - 1.0, self.dims[2] as f64 - 1.0) * (0.5 * self.spacing)
    }

    /// Voxel index nearest to a world coordinate along `axis`, clamped.
    pub fn nearest_index(&self, axis: usize, coord: f64) -> usize {
        let i = ((coord - self.origin[axis]) / self.spacing).round();
        i.clamp(0.0, (self.dims[axis] - 1) as f64) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelVolume {
    pub spec: VolumeSpec,
    pub data: Vec<f64>,
}

impl VoxelVolume {
    pub fn zeros(spec: VolumeSpec) -> Self {
        Self {
            data: vec![0.0; spec.len()],
            spec,
        }
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.spec.index(x, y, z)]
    }

    /// Constant-y plane, `nz` rows of `nx`, row 0 at the lowest z.
    pub fn axial_slice(&self, y: usize) -> Vec<f64> {
        let [nx, _, nz] = self.spec.dims;
        let mut out = Vec::with_capacity(nx * nz);
        for z in 0..nz {
            for x in 0..nx {
                out.push(self.get(x, y, z));
            }
        }
        out
    }

    /// Constant-z plane, `ny` rows of `nx`, row 0 at the highest y.
    pub fn sagittal_slice(&self, z: usize) -> Vec<f64> {
        let [nx, ny, _] = self.spec.dims;
        let mut out = Vec::with_capacity(nx * ny);
        for y in (0..ny).rev() {
            for x in 0..nx {
                out.push(self.get(x, y, z));
            }
        }
        out
    }

    /// Raw little-endian f32 plus `<path>.meta`.
    pub fn save(&self, raw: &Path) -> Result<(), ReconError> {
        io::write_raw_f32(raw, self.data.iter().map(|&v| v as f32))?;
        let s = &self.spec;
        let mut meta = Meta::new();
        meta.set("nx", s.dims[0])
            .set("ny", s.dims[1])
            .set("nz", s.dims[2])
            .set("spacing", s.spacing)
            .set("origin_x", s.origin.x)
            .set("origin_y", s.origin.y)
            .set("origin_z", s.origin.z)
            .set("dtype", "f32le")
            .set("order", "z,y,x")
            .set("units", "1/mm");
        meta.save(&meta_path(raw))?;
        Ok(())
    }

    pub fn load(raw: &Path) -> Result<Self, ReconError> {
        let mp = meta_path(raw);
        let meta = Meta::load(&mp)?;
        let spec = VolumeSpec {
            dims: [meta.parsed("nx", &mp)?, meta.parsed("ny", &mp)?, meta.parsed("nz", &mp)?],
            spacing: meta.parsed("spacing", &mp)?,
            origin: Vec3::new(
                meta.parsed("origin_x", &mp)?,
                meta.parsed("origin_y", &mp)?,
                meta.parsed("origin_z", &mp)?,
            ),
        };
        spec.validate()?;
        let data = io::read_raw_f32(raw, spec.len())?;
        Ok(Self {
            spec,
            data: data.into_iter().map(f64::from).collect(),
        })
    }
}

/// `sdd / sqrt(sdd^2 + u'^2 + v'^2)` per detector pixel, row-major.
pub fn cosine_weights(geom: &ScanGeometry) -> Vec<f64> {
    let mut out = Vec::with_capacity(geom.rows * geom.cols);
    for r in 0..geom.rows {
        for c in 0..geom.cols {
            let (u, v) = geom.pixel_to_mm(c as f64, r as f64);
            out.push(geom.sdd / (geom.sdd * geom.sdd + u * u + v * v).sqrt());
        }
    }
    out
}

/// Cosine-weighted copy of the stack in double precision.
pub fn preweight(stack: &ProjectionStack, geom: &ScanGeometry) -> Vec<f64> {
    let w = cosine_weights(geom);
    stack
        .data
        .chunks_exact(w.len())
        .flat_map(|view| view.iter().zip(&w).map(|(&p, &wi)| p as f64 * wi))
        .collect()
}

/// Largest fan half-angle of the detector, radians.
pub fn fan_half_angle(geom: &ScanGeometry) -> f64 {
    let (u0, _) = geom.pixel_to_mm(0.0, 0.0);
    let (u1, _) = geom.pixel_to_mm(geom.cols as f64 - 1.0, 0.0);
    (u0.abs().max(u1.abs()) / geom.sdd).atan()
}

/// Parker weight of the ray at source angle `beta` (measured from the start
/// of the scan) and fan angle `gamma`, for an overscan of `2 delta` beyond
/// a half turn. `gamma` is signed so that the conjugate ray is
/// `(beta + pi + 2 gamma, -gamma)`.
pub fn parker_weight(beta: f64, gamma: f64, delta: f64) -> f64 {
    if beta < 0.0 || beta > PI + 2.0 * delta {
        return 0.0;
    }
    if beta < 2.0 * (delta - gamma) {
        (PI / 4.0 * beta / (delta - gamma)).sin().powi(2)
    } else if beta <= PI - 2.0 * gamma {
        1.0
    } else {
        (PI / 4.0 * (PI + 2.0 * delta - beta) / (delta + gamma)).sin().powi(2)
    }
}

/// Redundancy weights per view and detector column (`n_views * cols`).
/// Each view stands for the angular interval it starts, so its angle is
/// taken at the interval's center. Full turns get a uniform one half.
pub fn redundancy_weights(geom: &ScanGeometry) -> Result<Vec<f64>, ReconError> {
    let step = geom.angular_step.to_radians().abs();
    let coverage = step * geom.n_views as f64;
    let fan = fan_half_angle(geom);
    if coverage >= 2.0 * PI - 1e-12 {
        return Ok(vec![0.5; geom.n_views * geom.cols]);
    }
    let delta = (coverage - PI) * 0.5;
    if delta < fan {
        return Err(ReconError::InsufficientCoverage {
            coverage_deg: coverage.to_degrees(),
            fan_deg: fan.to_degrees(),
        });
    }
    // a ray at detector +u leans toward the direction of rotation, so its
    // conjugate is reached earlier; flip the sign to match parker_weight
    let sense = geom.angular_step.signum();
    let gammas: Vec<f64> = (0..geom.cols)
        .map(|c| -sense * (geom.pixel_to_mm(c as f64, 0.0).0 / geom.sdd).atan())
        .collect();
    let mut out = Vec::with_capacity(geom.n_views * geom.cols);
    for k in 0..geom.n_views {
        let beta = (k as f64 + 0.5) * step;
        out.extend(gammas.iter().map(|&g| parker_weight(beta, g, delta)));
    }
    Ok(out)
}

/// Closed-form Ram-Lak kernel at integer offset `n` for sample spacing `d`.
pub fn ramp_kernel(n: i64, d: f64) -> f64 {
    if n == 0 {
        1.0 / (4.0 * d * d)
    } else if n % 2 == 0 {
        0.0
    } else {
        -1.0 / (PI * n as f64 * d).powi(2)
    }
}

/// Row filter: linear (zero-padded) convolution with the Ram-Lak kernel,
/// `out[i] = sum_j h(i - j) x[j]`, through FFTs of a power-of-two length of
/// at least twice the row.
pub struct RampFilter {
    cols: usize,
    len: usize,
    kernel: Vec<Complex<f64>>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl RampFilter {
    pub fn new(cols: usize, spacing: f64) -> Result<Self, ReconError> {
        if cols < 2 {
            return Err(ReconError::RowTooShort);
        }
        let len = (2 * cols).next_power_of_two();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(len);
        let inverse = planner.plan_fft_inverse(len);
        let mut kernel = vec![Complex::new(0.0, 0.0); len];
        for n in -(cols as i64 - 1)..cols as i64 {
            kernel[n.rem_euclid(len as i64) as usize] = Complex::new(ramp_kernel(n, spacing), 0.0);
        }
        forward.process(&mut kernel);
        let scale = 1.0 / len as f64;
        kernel.iter_mut().for_each(|k| *k *= scale);
        Ok(Self {
            cols,
            len,
            kernel,
            forward,
            inverse,
        })
    }

    pub fn padded_len(&self) -> usize {
        self.len
    }

    /// Filters `row` in place using `buf` as scratch.
    pub fn apply(&self, row: &mut [f64], buf: &mut Vec<Complex<f64>>) {
        debug_assert_eq!(row.len(), self.cols);
        buf.clear();
        buf.extend(row.iter().map(|&x| Complex::new(x, 0.0)));
        buf.resize(self.len, Complex::new(0.0, 0.0));
        self.forward.process(buf);
        buf.iter_mut().zip(&self.kernel).for_each(|(b, k)| *b *= k);
        self.inverse.process(buf);
        row.iter_mut().zip(buf.iter()).for_each(|(r, b)| *r = b.re);
    }
}

/// Ramp-filters every detector row in place.
pub fn ramp_filter(data: &mut [f64], cols: usize, spacing: f64) -> Result<(), ReconError> {
    let filter = RampFilter::new(cols, spacing)?;
    data.par_chunks_mut(cols).for_each_init(Vec::new, |buf, row| filter.apply(row, buf));
    Ok(())
}

/// Voxel-driven backprojection. `filtered` holds one `rows * cols` image
/// per matrix; each view contributes `scale * (sid / depth)^2 * sample`.
/// Every voxel sums its views in index order, so results do not depend on
/// the number of workers.
#[allow(clippy::too_many_arguments)]
pub fn backproject(
    filtered: &[f64],
    cols: usize,
    rows: usize,
    matrices: &[ProjectionMatrix],
    spec: &VolumeSpec,
    sid: f64,
    scale: f64,
) -> Result<VoxelVolume, ReconError> {
    spec.validate()?;
    let per_view = cols * rows;
    if filtered.len() != per_view * matrices.len() {
        return Err(ReconError::CountMismatch {
            what: "projection samples",
            expected: per_view * matrices.len(),
            got: filtered.len(),
        });
    }
    let [nx, ny, _] = spec.dims;
    let mut vol = VoxelVolume::zeros(*spec);
    let mats: Vec<[[f64; 4]; 3]> = matrices
        .iter()
        .map(|p| {
            let m = p.matrix();
            std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
        })
        .collect();
    let sid2 = sid * sid;
    let step = spec.spacing;
    vol.data.par_chunks_mut(nx * ny).enumerate().for_each(|(z, slab)| {
        let mut acc = vec![0.0; nx];
        for y in 0..ny {
            acc.iter_mut().for_each(|a| *a = 0.0);
            let p0 = spec.position(0, y, z);
            for (view, m) in mats.iter().enumerate() {
                let img = &filtered[view * per_view..(view + 1) * per_view];
                let h = |r: usize| m[r][0] * p0.x + m[r][1] * p0.y + m[r][2] * p0.z + m[r][3];
                let (mut hu, mut hv, mut hw) = (h(0), h(1), h(2));
                let (du, dv, dw) = (m[0][0] * step, m[1][0] * step, m[2][0] * step);
                for a in acc.iter_mut() {
                    if hw > 1e-9 {
                        let u = hu / hw;
                        let v = hv / hw;
                        let s = bilinear(img, cols, rows, u, v);
                        if s != 0.0 {
                            *a += s * sid2 / (hw * hw);
                        }
                    }
                    hu += du;
                    hv += dv;
                    hw += dw;
                }
            }
            slab[y * nx..(y + 1) * nx]
                .iter_mut()
                .zip(&acc)
                .for_each(|(o, a)| *o = a * scale);
        }
    });
    Ok(vol)
}

/// Bilinear detector sample at column `u`, row `v`; zero outside.
#[inline]
fn bilinear(img: &[f64], cols: usize, rows: usize, u: f64, v: f64) -> f64 {
    if !(u > -1.0 && v > -1.0 && u < cols as f64 && v < rows as f64) {
        return 0.0;
    }
    let c0 = u.floor();
    let r0 = v.floor();
    let fu = u - c0;
    let fv = v - r0;
    let (c0, r0) = (c0 as isize, r0 as isize);
    let at = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= rows as isize || c >= cols as isize {
            0.0
        } else {
            img[r as usize * cols + c as usize]
        }
    };
    let top = at(r0, c0) * (1.0 - fu) + at(r0, c0 + 1) * fu;
    let bottom = at(r0 + 1, c0) * (1.0 - fu) + at(r0 + 1, c0 + 1) * fu;
    top * (1.0 - fv) + bottom * fv
}

/// Full FDK chain. `motion` (mm) modifies the view matrices as `P_k M_k`.
pub fn reconstruct(
    stack: &ProjectionStack,
    geom: &ScanGeometry,
    motion: Option<&MotionTrack>,
    spec: &VolumeSpec,
) -> Result<VoxelVolume, ReconError> {
    let mut mats = build_trajectory(geom)?;
    if (stack.cols, stack.rows, stack.n_views) != (geom.cols, geom.rows, geom.n_views) {
        return Err(ReconError::CountMismatch {
            what: "stack views",
            expected: geom.n_views,
            got: stack.n_views,
        });
    }
    if let Some(track) = motion {
        if track.len() != mats.len() {
            return Err(ReconError::CountMismatch {
                what: "motion matrices",
                expected: mats.len(),
                got: track.len(),
            });
        }
        let (dt, dr) = track.motion[0].distance_to(&crate::se3::RigidPose::identity());
        if dt > 1e-9 || dr > 1e-12 {
            return Err(ReconError::MotionNotAnchored);
        }
        mats = mats.iter().zip(&track.motion).map(|(p, m)| apply_motion(p, m)).collect();
    }
    let mut data = preweight(stack, geom);
    let parker = redundancy_weights(geom)?;
    let (cols, rows) = (geom.cols, geom.rows);
    data.par_chunks_mut(cols * rows).enumerate().for_each(|(k, view)| {
        let w = &parker[k * cols..(k + 1) * cols];
        view.chunks_exact_mut(cols)
            .for_each(|row| row.iter_mut().zip(w).for_each(|(p, wi)| *p *= wi));
    });
    ramp_filter(&mut data, cols, geom.pixel_pitch)?;
    // move the filtered data from detector to isocenter scale
    let to_iso = geom.pixel_pitch * geom.sdd / geom.sid;
    data.par_iter_mut().for_each(|v| *v *= to_iso);
    backproject(
        &data,
        cols,
        rows,
        &mats,
        spec,
        geom.sid,
        geom.angular_step.to_radians().abs(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::view_matrix;
    use crate::phantom::{PosedPhantom, PosedPrimitive};
    use crate::projector::render_view;
    use crate::se3::{RigidPose, Rotation3};
    use proptest::prelude::*;

    #[test]
    fn cosine_weight_values() {
        let g = ScanGeometry::default();
        let w = cosine_weights(&g);
        // even detector: no pixel sits exactly on the principal point; check
        // the formula there directly and at the corner
        let (cu, cv) = g.principal_point();
        let (u, v) = g.pixel_to_mm(cu, cv);
        assert_eq!(g.sdd / (g.sdd * g.sdd + u * u + v * v).sqrt(), 1.0);
        let (u, v) = g.pixel_to_mm(0.0, 0.0);
        let corner = 1198.0 / (1198.0f64.powi(2) + u * u + v * v).sqrt();
        assert_eq!(w[0], corner);
        let nominal = 1198.0 / (1198.0f64.powi(2) + (310.0f64 * 0.616).powi(2) + (240.0f64 * 0.616).powi(2)).sqrt();
        assert!((corner - nominal).abs() < 1e-4);
        assert!(w.iter().all(|&x| x > 0.0 && x <= 1.0));
        // monotone along the center row moving outwards
        let r = g.rows / 2;
        for c in g.cols / 2..g.cols - 1 {
            assert!(w[r * g.cols + c + 1] < w[r * g.cols + c]);
        }
    }

    #[test]
    fn ramp_impulse_response() {
        let cols = 64;
        let d = 0.616;
        let f = RampFilter::new(cols, d).unwrap();
        assert!(f.padded_len() >= 2 * cols);
        let mut row = vec![0.0; cols];
        row[20] = 1.0;
        let mut buf = Vec::new();
        f.apply(&mut row, &mut buf);
        for (i, v) in row.iter().enumerate() {
            let expected = ramp_kernel(i as i64 - 20, d);
            assert!((v - expected).abs() < 1e-9, "{i}: {v} vs {expected}");
        }
    }

    #[test]
    fn ramp_suppresses_dc_in_interior() {
        // zero padding makes the row ends see a step, so only the interior
        // of a long row is checked
        let cols = 4096;
        let mut row = vec![1.0; cols];
        let f = RampFilter::new(cols, 1.0).unwrap();
        f.apply(&mut row, &mut Vec::new());
        let interior = &row[cols / 4..3 * cols / 4];
        let peak = interior.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak < 1e-3, "peak {peak}");
    }

    #[test]
    fn ramp_rejects_short_rows() {
        assert!(matches!(RampFilter::new(1, 1.0), Err(ReconError::RowTooShort)));
    }

    proptest! {
        #[test]
        fn ramp_linearity(a in prop::collection::vec(-1.0f64..1.0, 37), b in prop::collection::vec(-1.0f64..1.0, 37)) {
            let f = RampFilter::new(37, 0.5).unwrap();
            let mut buf = Vec::new();
            let mut sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let (mut fa, mut fb) = (a.clone(), b.clone());
            f.apply(&mut sum, &mut buf);
            f.apply(&mut fa, &mut buf);
            f.apply(&mut fb, &mut buf);
            for i in 0..37 {
                prop_assert!((sum[i] - fa[i] - fb[i]).abs() < 1e-9);
            }
        }

        #[test]
        fn parker_conjugates_sum_to_one(beta in 0.0f64..1.0, gamma in -0.15f64..0.15) {
            let delta = 0.16;
            let b = beta * (PI + 2.0 * delta);
            let conj = b + PI + 2.0 * gamma;
            let other = if conj <= PI + 2.0 * delta { conj } else { b - PI + 2.0 * gamma };
            let w = parker_weight(b, gamma, delta) + parker_weight(other, -gamma, delta);
            prop_assert!((w - 1.0).abs() < 1e-12, "{w}");
        }
    }

    #[test]
    fn parker_sign_matches_geometry() {
        // the ray through column c at view k is met again, reversed, at the
        // view and column the weight convention predicts
        let g = ScanGeometry {
            angular_step: 0.1,
            n_views: 3600,
            ..ScanGeometry::default()
        };
        let p = view_matrix(&g, 100);
        let c = 500.0;
        let src = p.source();
        let dir = p.ray_direction(c, 239.5).normalize();
        let gamma = -(g.pixel_to_mm(c, 0.0).0 / g.sdd).atan();
        let beta = g.view_angle(100);
        let conj_beta = beta + PI + 2.0 * gamma;
        let conj_src = g.isocenter + Vec3::new(conj_beta.cos(), 0.0, conj_beta.sin()) * g.sid;
        // the conjugate source lies on the original ray's line
        let off = (conj_src - src).cross(&dir).norm();
        assert!(off < 1e-6, "off {off}");
    }

    #[test]
    fn redundancy_weights_cover_each_line_once() {
        let g = ScanGeometry::desk();
        let w = redundancy_weights(&g).unwrap();
        assert_eq!(w.len(), g.n_views * g.cols);
        assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let full = ScanGeometry {
            n_views: 450,
            ..ScanGeometry::desk()
        };
        assert!(redundancy_weights(&full).unwrap().iter().all(|&x| x == 0.5));
        let short = ScanGeometry {
            n_views: 100,
            ..ScanGeometry::desk()
        };
        assert!(matches!(
            redundancy_weights(&short),
            Err(ReconError::InsufficientCoverage { .. })
        ));
    }

    fn tiny_geom() -> ScanGeometry {
        ScanGeometry {
            cols: 96,
            rows: 64,
            pixel_pitch: 3.2,
            n_views: 100,
            angular_step: 2.0,
            ..ScanGeometry::default()
        }
    }

    fn render(ph: &PosedPhantom, g: &ScanGeometry) -> ProjectionStack {
        let mats = build_trajectory(g).unwrap();
        let data = mats.iter().flat_map(|p| render_view(ph, p, g.cols, g.rows)).collect();
        ProjectionStack {
            cols: g.cols,
            rows: g.rows,
            n_views: g.n_views,
            data,
            times: (0..g.n_views).map(|k| g.view_time(k)).collect(),
        }
    }

    fn sphere(center: Vec3, r: f64, mu: f64) -> PosedPhantom {
        PosedPhantom {
            primitives: vec![PosedPrimitive::new("s", &RigidPose::from_translation(center), Vec3::repeat(r), mu)],
        }
    }

    #[test]
    fn sphere_reconstruction_level() {
        let g = ScanGeometry::desk();
        let stack = render(&sphere(g.isocenter, 50.0, 0.02), &g);
        let spec = VolumeSpec::centered(40, 4.0, g.isocenter);
        let vol = reconstruct(&stack, &g, None, &spec).unwrap();
        let (mut inner, mut n_in) = (0.0, 0);
        let (mut outer, mut n_out) = (0.0, 0);
        for z in 0..40 {
            for y in 0..40 {
                for x in 0..40 {
                    let r = (spec.position(x, y, z) - g.isocenter).norm();
                    let v = vol.get(x, y, z);
                    if r <= 10.0 {
                        inner += v;
                        n_in += 1;
                    } else if r > 60.0 && r < 75.0 {
                        outer += v.abs();
                        n_out += 1;
                    }
                }
            }
        }
        let mean = inner / n_in as f64;
        assert!((mean / 0.02 - 1.0).abs() < 0.1, "mean {mean}");
        // view-aliasing streaks dominate outside; their mean stays small
        let outside = outer / n_out as f64;
        assert!(outside < 0.1 * 0.02, "outside {outside}");
    }

    #[test]
    fn zero_stack_and_counts() {
        let g = tiny_geom();
        let stack = ProjectionStack::zeros(g.cols, g.rows, g.n_views);
        let spec = VolumeSpec::centered(8, 10.0, g.isocenter);
        let vol = reconstruct(&stack, &g, None, &spec).unwrap();
        assert!(vol.data.iter().all(|&v| v == 0.0));
        let mats = build_trajectory(&g).unwrap();
        assert!(matches!(
            backproject(&[0.0; 10], g.cols, g.rows, &mats, &spec, g.sid, 1.0),
            Err(ReconError::CountMismatch { .. })
        ));
    }

    #[test]
    fn single_view_brute_force() {
        // 8^3 grid, one view, uniform row of ones on the central detector row
        let g = ScanGeometry {
            cols: 16,
            rows: 9,
            pixel_pitch: 8.0,
            n_views: 1,
            ..ScanGeometry::default()
        };
        let mut img = vec![0.0; 16 * 9];
        img[4 * 16..5 * 16].iter_mut().for_each(|v| *v = 1.0);
        let p = view_matrix(&g, 0);
        let spec = VolumeSpec::centered(8, 6.0, g.isocenter);
        let vol = backproject(&img, 16, 9, &[p], &spec, g.sid, 0.5).unwrap();
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    let pos = spec.position(x, y, z);
                    let h = p.apply(&pos);
                    let (u, v) = (h.x / h.z, h.y / h.z);
                    // brute force: explicit tent weights over all pixels
                    let mut s = 0.0;
                    for r in 0..9 {
                        for c in 0..16 {
                            let wu = (1.0 - (u - c as f64).abs()).max(0.0);
                            let wv = (1.0 - (v - r as f64).abs()).max(0.0);
                            s += wu * wv * img[r * 16 + c];
                        }
                    }
                    let expected = 0.5 * (g.sid / h.z).powi(2) * s;
                    assert!((vol.get(x, y, z) - expected).abs() < 1e-12);
                }
            }
        }
        // the smear is constant along each ray up to the distance weight
        let mid = vol.get(4, 4, 4) / (g.sid / p.weight(&spec.position(4, 4, 4))).powi(2);
        let near = vol.get(0, 4, 4) / (g.sid / p.weight(&spec.position(0, 4, 4))).powi(2);
        assert!(mid > 0.0 && near > 0.0);
    }

    #[test]
    fn identity_motion_is_bit_exact_and_linearity() {
        let g = tiny_geom();
        let ph = sphere(g.isocenter + Vec3::new(10.0, -5.0, 0.0), 30.0, 0.02);
        let stack = render(&ph, &g);
        let spec = VolumeSpec::centered(16, 8.0, g.isocenter);
        let plain = reconstruct(&stack, &g, None, &spec).unwrap();
        let ident = MotionTrack::identity((0..g.n_views).map(|k| g.view_time(k)).collect());
        assert_eq!(reconstruct(&stack, &g, Some(&ident), &spec).unwrap(), plain);

        let a = 3.7;
        let scaled = ProjectionStack {
            data: stack.data.iter().map(|v| v * a as f32).collect(),
            ..stack.clone()
        };
        let vs = reconstruct(&scaled, &g, None, &spec).unwrap();
        let peak = plain.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (x, y) in vs.data.iter().zip(&plain.data) {
            // f32 input rounding of the scaled stack bounds the agreement
            assert!((x - a * y).abs() < 1e-6 * a * peak);
        }
    }

    #[test]
    fn linearity_exact_in_double() {
        let g = tiny_geom();
        let mats = build_trajectory(&g).unwrap();
        let spec = VolumeSpec::centered(12, 8.0, g.isocenter);
        let n = g.cols * g.rows * g.n_views;
        let base: Vec<f64> = (0..n).map(|i| ((i * 7919) % 1000) as f64 * 1e-3).collect();
        let a = 0.3771;
        let scaled: Vec<f64> = base.iter().map(|v| v * a).collect();
        let v1 = backproject(&base, g.cols, g.rows, &mats, &spec, g.sid, 0.1).unwrap();
        let v2 = backproject(&scaled, g.cols, g.rows, &mats, &spec, g.sid, 0.1).unwrap();
        let peak = v1.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (x, y) in v2.data.iter().zip(&v1.data) {
            assert!((x - a * y).abs() <= 1e-9 * a * peak);
        }
    }

    #[test]
    fn view_order_invariance() {
        let g = tiny_geom();
        let mats = build_trajectory(&g).unwrap();
        let spec = VolumeSpec::centered(12, 8.0, g.isocenter);
        let per = g.cols * g.rows;
        let data: Vec<f64> = (0..per * g.n_views).map(|i| ((i * 31) % 97) as f64 * 1e-2).collect();
        let order: Vec<usize> = (0..g.n_views).rev().collect();
        let pm: Vec<ProjectionMatrix> = order.iter().map(|&k| mats[k]).collect();
        let pd: Vec<f64> = order.iter().flat_map(|&k| data[k * per..(k + 1) * per].to_vec()).collect();
        let a = backproject(&data, g.cols, g.rows, &mats, &spec, g.sid, 0.1).unwrap();
        let b = backproject(&pd, g.cols, g.rows, &pm, &spec, g.sid, 0.1).unwrap();
        let peak = a.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-9 * peak.max(1.0));
        }
    }

    #[test]
    fn exact_rigid_motion_is_undone() {
        let g = tiny_geom();
        let ph = sphere(g.isocenter + Vec3::new(5.0, 0.0, -8.0), 35.0, 0.02);
        let spec = VolumeSpec::centered(24, 6.0, g.isocenter);
        let static_vol = reconstruct(&render(&ph, &g), &g, None, &spec).unwrap();
        let mats = build_trajectory(&g).unwrap();
        let motions: Vec<RigidPose> = (0..g.n_views)
            .map(|k| {
                let t = k as f64 / g.n_views as f64;
                let about_iso = RigidPose::from_translation(g.isocenter)
                    .compose(&RigidPose::from_rotation(Rotation3::about_x(0.03 * (6.0 * t).sin())))
                    .compose(&RigidPose::from_translation(-g.isocenter));
                RigidPose::from_translation(Vec3::new(5.0 * (4.0 * t).sin(), 3.0 * t, 0.0)).compose(&about_iso)
            })
            .collect();
        let origin = motions[0].inverse();
        let motions: Vec<RigidPose> = motions.iter().map(|m| m.compose(&origin)).collect();
        let moved_data: Vec<f32> = mats
            .iter()
            .zip(&motions)
            .flat_map(|(p, m)| render_view(&ph.transformed(m), p, g.cols, g.rows))
            .collect();
        let moved = ProjectionStack {
            data: moved_data,
            ..render(&ph, &g)
        };
        let track = MotionTrack {
            times: (0..g.n_views).map(|k| g.view_time(k)).collect(),
            sensor_poses: motions.clone(),
            motion: motions,
        };
        let corrected = reconstruct(&moved, &g, Some(&track), &spec).unwrap();
        let uncorrected = reconstruct(&moved, &g, None, &spec).unwrap();
        // each reconstruction carries its own discretization error, so the
        // corrected volume is judged against the analytic object
        let truth: Vec<f64> = (0..spec.len())
            .map(|i| {
                let (x, y, z) = (i % 24, (i / 24) % 24, i / 576);
                ph.mu_at(&spec.position(x, y, z))
            })
            .collect();
        let err = |v: &VoxelVolume, r: &[f64]| {
            v.data.iter().zip(r).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        };
        let (s, c, u) = (
            err(&static_vol, &truth),
            err(&corrected, &truth),
            err(&uncorrected, &truth),
        );
        assert!(c < 1.1 * s, "corrected {c} static {s}");
        assert!(u > 1.5 * c, "uncorrected {u} corrected {c}");
        assert!(err(&corrected, &static_vol.data) < 0.5 * err(&uncorrected, &static_vol.data));

        let mut bad = track.clone();
        bad.motion[0] = RigidPose::from_translation(Vec3::new(1.0, 0.0, 0.0));
        assert!(matches!(
            reconstruct(&moved, &g, Some(&bad), &spec),
            Err(ReconError::MotionNotAnchored)
        ));
    }

    #[test]
    fn volume_io_and_slices() {
        let spec = VolumeSpec {
            dims: [3, 4, 5],
            spacing: 2.0,
            origin: Vec3::new(-1.0, 0.5, 2.0),
        };
        let vol = VoxelVolume {
            spec,
            data: (0..60).map(|i| i as f64 * 0.25).collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.raw");
        vol.save(&p).unwrap();
        assert_eq!(VoxelVolume::load(&p).unwrap(), vol);
        assert_eq!(vol.axial_slice(1).len(), 15);
        assert_eq!(vol.axial_slice(1)[3], vol.get(0, 1, 1));
        assert_eq!(vol.sagittal_slice(0)[0], vol.get(0, 3, 0));
        assert_eq!(spec.nearest_index(1, 100.0), 3);
        assert!((spec.center() - Vec3::new(1.0, 3.5, 6.0)).norm() < 1e-12);
    }
}
