//! Analytic forward projection of the posed phantom and fiducial marker
//! detections.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{build_trajectory, GeometryError, ProjectionMatrix, ScanGeometry};
use crate::io::{self, IoError, Meta};
use crate::motion::{Segment, SegmentTrajectory};
use crate::phantom::{line_integral, pose_at, PhantomError, PosedPhantom, Primitive};
use crate::se3::Vec3;

#[derive(Debug, Error)]
pub enum ProjectorError {
    #[error("trajectory has {got} samples, scan needs {needed}")]
    TrajectoryTooShort { needed: usize, got: usize },
    #[error("marker set needs at least {needed} markers, got {got}")]
    TooFewMarkers { needed: usize, got: usize },
    #[error("invalid noise sigma {0}")]
    InvalidSigma(f64),
    #[error("stack dimensions {found:?} do not match geometry {expected:?}")]
    DimensionMismatch {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Line-integral images, view-major then row-major. Row 0 is the bottom
/// detector row (v increases upwards).
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionStack {
    pub cols: usize,
    pub rows: usize,
    pub n_views: usize,
    pub data: Vec<f32>,
    /// Acquisition time of each view relative to the first, seconds.
    pub times: Vec<f64>,
}

impl ProjectionStack {
    pub fn zeros(cols: usize, rows: usize, n_views: usize) -> Self {
        Self {
            cols,
            rows,
            n_views,
            data: vec![0.0; cols * rows * n_views],
            times: vec![0.0; n_views],
        }
    }

    pub fn view(&self, k: usize) -> &[f32] {
        let n = self.cols * self.rows;
        &self.data[k * n..(k + 1) * n]
    }

    pub fn pixel(&self, k: usize, row: usize, col: usize) -> f32 {
        self.data[(k * self.rows + row) * self.cols + col]
    }

    /// Raw little-endian f32 stack plus `<path>.meta`.
    pub fn save(&self, raw: &Path, geom_hash: &str) -> Result<(), ProjectorError> {
        io::write_raw_f32(raw, self.data.iter().copied())?;
        let mut meta = Meta::new();
        meta.set("cols", self.cols)
            .set("rows", self.rows)
            .set("views", self.n_views)
            .set("dtype", "f32le")
            .set("order", "view,row,col")
            .set("row0", "bottom")
            .set("geometry_hash", geom_hash)
            .set(
                "times",
                self.times.iter().map(|t| format!("{t}")).collect::<Vec<_>>().join(","),
            );
        meta.save(&meta_path(raw))?;
        Ok(())
    }

    pub fn load(raw: &Path) -> Result<Self, ProjectorError> {
        let mp = meta_path(raw);
        let meta = Meta::load(&mp)?;
        let cols: usize = meta.parsed("cols", &mp)?;
        let rows: usize = meta.parsed("rows", &mp)?;
        let n_views: usize = meta.parsed("views", &mp)?;
        let data = io::read_raw_f32(raw, cols * rows * n_views)?;
        let times = meta
            .get("times")
            .unwrap_or("")
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .unwrap_or_default();
        let times = if times.len() == n_views { times } else { vec![0.0; n_views] };
        Ok(Self {
            cols,
            rows,
            n_views,
            data,
            times,
        })
    }

    /// One view as 16-bit PGM, top row first, scaled to the view's range.
    pub fn save_view_pgm(&self, k: usize, path: &Path) -> Result<(), ProjectorError> {
        let view = self.view(k);
        let mut px = Vec::with_capacity(view.len());
        for r in (0..self.rows).rev() {
            px.extend(view[r * self.cols..(r + 1) * self.cols].iter().map(|&v| v as f64));
        }
        let hi = px.iter().copied().fold(0.0, f64::max);
        io::write_pgm16(path, self.cols, self.rows, &px, 0.0, hi)?;
        Ok(())
    }
}

pub fn meta_path(raw: &Path) -> std::path::PathBuf {
    let mut s = raw.as_os_str().to_owned();
    s.push(".meta");
    s.into()
}

/// One ray per pixel center from the source of `p`.
pub fn render_view(phantom: &PosedPhantom, p: &ProjectionMatrix, cols: usize, rows: usize) -> Vec<f32> {
    let src = p.source();
    let mut out = Vec::with_capacity(cols * rows);
    for r in 0..rows {
        for c in 0..cols {
            let dir = p.ray_direction(c as f64, r as f64).normalize();
            out.push(line_integral(phantom, &src, &dir) as f32);
        }
    }
    out
}

/// Renders all views. With `motion` on, view `k` uses trajectory sample `k`
/// (the trajectory must be sampled at the view instants); otherwise every
/// view uses sample 0. Parallel over views on the current rayon pool.
pub fn render_scan(
    primitives: &[Primitive],
    traj: &SegmentTrajectory,
    geom: &ScanGeometry,
    motion: bool,
) -> Result<ProjectionStack, ProjectorError> {
    let mats = build_trajectory(geom)?;
    let needed = if motion { geom.n_views } else { 1 };
    if traj.len() < needed {
        return Err(ProjectorError::TrajectoryTooShort { needed, got: traj.len() });
    }
    let views: Vec<Vec<f32>> = mats
        .par_iter()
        .enumerate()
        .map(|(k, p)| {
            let phantom = pose_at(primitives, traj, if motion { k } else { 0 })?;
            Ok(render_view(&phantom, p, geom.cols, geom.rows))
        })
        .collect::<Result<_, PhantomError>>()?;
    Ok(ProjectionStack {
        cols: geom.cols,
        rows: geom.rows,
        n_views: geom.n_views,
        data: views.concat(),
        times: (0..geom.n_views).map(|k| geom.view_time(k)).collect(),
    })
}

/// A fiducial bound to a segment, position in the segment frame, mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Marker {
    pub segment: Segment,
    pub position: Vec3,
}

/// Fewest markers accepted for pose estimation.
pub const MIN_MARKERS: usize = 6;

/// Twelve skin markers around the knee, six per segment in two rings, on
/// the soft-tissue surface of [`crate::phantom::default_leg_phantom`].
pub fn default_markers() -> Vec<Marker> {
    let mut out = Vec::new();
    let rings = [
        (Segment::Thigh, -340.0, 64.0),
        (Segment::Thigh, -385.0, 55.0),
        (Segment::Shank, -40.0, 48.0),
        (Segment::Shank, -85.0, 53.0),
    ];
    for (i, (segment, y, radius)) in rings.into_iter().enumerate() {
        for j in 0..3 {
            let a = (j as f64 * 120.0 + i as f64 * 30.0).to_radians();
            out.push(Marker {
                segment,
                position: Vec3::new(radius * a.cos(), y, radius * a.sin()),
            });
        }
    }
    out
}

/// World marker positions (mm) at trajectory sample `index`.
pub fn marker_positions(markers: &[Marker], traj: &SegmentTrajectory, index: usize) -> Vec<Vec3> {
    let thigh = traj.thigh[index].scale_translation(1e3);
    let shank = traj.shank[index].scale_translation(1e3);
    markers
        .iter()
        .map(|m| match m.segment {
            Segment::Thigh => thigh.transform_point(&m.position),
            Segment::Shank => shank.transform_point(&m.position),
        })
        .collect()
}

/// Detector coordinates `(u, v)` of every marker in every view, with
/// seeded Gaussian pixel noise of standard deviation `sigma`.
pub fn project_markers(
    markers: &[Marker],
    traj: &SegmentTrajectory,
    geom: &ScanGeometry,
    sigma: f64,
    seed: u64,
) -> Result<Vec<Vec<(f64, f64)>>, ProjectorError> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(ProjectorError::InvalidSigma(sigma));
    }
    if traj.len() < geom.n_views {
        return Err(ProjectorError::TrajectoryTooShort {
            needed: geom.n_views,
            got: traj.len(),
        });
    }
    let mats = build_trajectory(geom)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).expect("sigma checked");
    let mut out = Vec::with_capacity(mats.len());
    for (k, p) in mats.iter().enumerate() {
        let mut view = Vec::with_capacity(markers.len());
        for x in marker_positions(markers, traj, k) {
            let (u, v) = p.project(&x)?;
            if sigma > 0.0 {
                view.push((u + noise.sample(&mut rng), v + noise.sample(&mut rng)));
            } else {
                view.push((u, v));
            }
        }
        out.push(view);
    }
    Ok(out)
}
