//! Image-quality metrics against the static reference: robust [0, 1]
//! normalization, background mask, masked RMSE and 3D SSIM.

use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::recon::{VolumeSpec, VoxelVolume};

pub const LOW_PERCENTILE: f64 = 0.1;
pub const HIGH_PERCENTILE: f64 = 99.9;
pub const DEFAULT_MASK_THRESHOLD: f64 = 0.05;
pub const SSIM_SIGMA: f64 = 1.5;
/// Window half-width: an 11-voxel window per axis.
pub const SSIM_RADIUS: usize = 5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("volume is constant between the normalization percentiles")]
    ConstantVolume,
    #[error("background mask is empty")]
    EmptyMask,
    #[error("dimension mismatch: {a:?} vs {b:?}")]
    DimensionMismatch { a: [usize; 3], b: [usize; 3] },
}

fn check_dims(a: &VolumeSpec, b: &VolumeSpec) -> Result<(), MetricsError> {
    if a.dims == b.dims {
        Ok(())
    } else {
        Err(MetricsError::DimensionMismatch { a: a.dims, b: b.dims })
    }
}

/// Linear-interpolated percentile (`p` in percent) of unsorted data.
pub fn percentile(data: &[f64], p: f64) -> f64 {
    let mut v = data.to_vec();
    v.sort_by(f64::total_cmp);
    percentile_sorted(&v, p)
}

fn percentile_sorted(v: &[f64], p: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = (p / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let i = pos.floor() as usize;
    let f = pos - i as f64;
    if i + 1 < v.len() {
        v[i] * (1.0 - f) + v[i + 1] * f
    } else {
        v[i]
    }
}

/// Affine map of the 0.1 / 99.9 percentiles onto 0 / 1, clamped to [0, 1].
pub fn normalize(vol: &VoxelVolume) -> Result<VoxelVolume, MetricsError> {
    let mut sorted = vol.data.clone();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&sorted, LOW_PERCENTILE);
    let hi = percentile_sorted(&sorted, HIGH_PERCENTILE);
    if !(hi > lo) {
        return Err(MetricsError::ConstantVolume);
    }
    let scale = 1.0 / (hi - lo);
    Ok(VoxelVolume {
        spec: vol.spec,
        data: vol.data.iter().map(|v| ((v - lo) * scale).clamp(0.0, 1.0)).collect(),
    })
}

/// Voxel mask on the same grid as a volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub dims: [usize; 3],
    pub data: Vec<bool>,
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    /// One step of 6-neighbour dilation.
    pub fn dilated(&self) -> Self {
        let [nx, ny, nz] = self.dims;
        let mut out = self.data.clone();
        let idx = |x: usize, y: usize, z: usize| (z * ny + y) * nx + x;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if !self.data[idx(x, y, z)] {
                        continue;
                    }
                    if x > 0 {
                        out[idx(x - 1, y, z)] = true;
                    }
                    if x + 1 < nx {
                        out[idx(x + 1, y, z)] = true;
                    }
                    if y > 0 {
                        out[idx(x, y - 1, z)] = true;
                    }
                    if y + 1 < ny {
                        out[idx(x, y + 1, z)] = true;
                    }
                    if z > 0 {
                        out[idx(x, y, z - 1)] = true;
                    }
                    if z + 1 < nz {
                        out[idx(x, y, z + 1)] = true;
                    }
                }
            }
        }
        Self { dims: self.dims, data: out }
    }
}

/// Voxels of the normalized reference at or above `threshold`, dilated once.
pub fn background_mask(reference: &VoxelVolume, threshold: f64) -> Result<Mask, MetricsError> {
    let mask = Mask {
        dims: reference.spec.dims,
        data: reference.data.iter().map(|&v| v >= threshold).collect(),
    }
    .dilated();
    if mask.count() == 0 {
        return Err(MetricsError::EmptyMask);
    }
    Ok(mask)
}

pub fn rmse(a: &VoxelVolume, b: &VoxelVolume, mask: &Mask) -> Result<f64, MetricsError> {
    check_dims(&a.spec, &b.spec)?;
    if mask.dims != a.spec.dims {
        return Err(MetricsError::DimensionMismatch { a: a.spec.dims, b: mask.dims });
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for ((x, y), &m) in a.data.iter().zip(&b.data).zip(&mask.data) {
        if m {
            sum += (x - y) * (x - y);
            n += 1;
        }
    }
    if n == 0 {
        return Err(MetricsError::EmptyMask);
    }
    Ok((sum / n as f64).sqrt())
}

fn gaussian_kernel() -> Vec<f64> {
    let r = SSIM_RADIUS as i64;
    (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect()
}

/// Separable Gaussian smoothing along one axis; windows cut by the border
/// are renormalized to unit weight.
fn smooth_axis(src: &[f64], dims: [usize; 3], axis: usize, kernel: &[f64]) -> Vec<f64> {
    let [nx, ny, _] = dims;
    let stride = [1, nx, nx * ny][axis];
    let n = dims[axis];
    let r = SSIM_RADIUS as isize;
    let mut out = vec![0.0; src.len()];
    out.par_chunks_mut(nx * ny).enumerate().for_each(|(z, slab)| {
        for y in 0..ny {
            for x in 0..nx {
                let i = [x, y, z][axis] as isize;
                let base = (z * ny + y) * nx + x;
                let (mut acc, mut wsum) = (0.0, 0.0);
                for k in -r..=r {
                    let j = i + k;
                    if j < 0 || j >= n as isize {
                        continue;
                    }
                    let w = kernel[(k + r) as usize];
                    let off = (j - i) * stride as isize;
                    acc += w * src[(base as isize + off) as usize];
                    wsum += w;
                }
                slab[y * nx + x] = acc / wsum;
            }
        }
    });
    out
}

fn gaussian_filter(src: &[f64], dims: [usize; 3]) -> Vec<f64> {
    let k = gaussian_kernel();
    let a = smooth_axis(src, dims, 0, &k);
    let b = smooth_axis(&a, dims, 1, &k);
    smooth_axis(&b, dims, 2, &k)
}

/// Local SSIM at every voxel.
pub fn ssim_map(a: &VoxelVolume, b: &VoxelVolume) -> Result<Vec<f64>, MetricsError> {
    check_dims(&a.spec, &b.spec)?;
    let dims = a.spec.dims;
    let mu_a = gaussian_filter(&a.data, dims);
    let mu_b = gaussian_filter(&b.data, dims);
    let sq = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let e_aa = gaussian_filter(&sq(&a.data, &a.data), dims);
    let e_bb = gaussian_filter(&sq(&b.data, &b.data), dims);
    let e_ab = gaussian_filter(&sq(&a.data, &b.data), dims);
    Ok((0..a.data.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .collect())
}

/// Mean local SSIM over the mask.
pub fn ssim(a: &VoxelVolume, b: &VoxelVolume, mask: &Mask) -> Result<f64, MetricsError> {
    if a.data == b.data {
        // identical inputs: every local value is exactly one
        return if mask.count() == 0 { Err(MetricsError::EmptyMask) } else { Ok(1.0) };
    }
    let map = ssim_map(a, b)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (s, &m) in map.iter().zip(&mask.data) {
        if m {
            sum += s;
            n += 1;
        }
    }
    if n == 0 {
        return Err(MetricsError::EmptyMask);
    }
    Ok(sum / n as f64)
}

/// Relative RMSE reduction versus the uncorrected arm, percent.
pub fn rmse_improvement(uncorrected: f64, value: f64) -> f64 {
    if uncorrected == 0.0 {
        0.0
    } else {
        (uncorrected - value) / uncorrected * 100.0
    }
}

/// Relative SSIM gain versus the uncorrected arm, percent.
pub fn ssim_improvement(uncorrected: f64, value: f64) -> f64 {
    if uncorrected == 0.0 {
        0.0
    } else {
        (value - uncorrected) / uncorrected * 100.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityReport {
    pub arm: String,
    pub rmse: f64,
    pub ssim: f64,
    pub mask_voxels: usize,
    pub rmse_improvement_pct: f64,
    pub ssim_improvement_pct: f64,
}

impl QualityReport {
    pub fn key_values(&self) -> String {
        let mut s = String::new();
        let a = &self.arm;
        let _ = writeln!(s, "{a}.rmse={}", self.rmse);
        let _ = writeln!(s, "{a}.ssim={}", self.ssim);
        let _ = writeln!(s, "{a}.mask_voxels={}", self.mask_voxels);
        let _ = writeln!(s, "{a}.rmse_improvement_pct={}", self.rmse_improvement_pct);
        let _ = writeln!(s, "{a}.ssim_improvement_pct={}", self.ssim_improvement_pct);
        s
    }

    pub const CSV_HEADER: &'static str = "arm,ssim,rmse,ssim_improvement_pct,rmse_improvement_pct";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.arm, self.ssim, self.rmse, self.ssim_improvement_pct, self.rmse_improvement_pct
        )
    }
}

/// Normalized reference with its mask, reused for every compared volume.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub reference: VoxelVolume,
    pub mask: Mask,
}

impl Evaluator {
    pub fn new(reference: &VoxelVolume, threshold: f64) -> Result<Self, MetricsError> {
        let reference = normalize(reference)?;
        let mask = background_mask(&reference, threshold)?;
        Ok(Self { reference, mask })
    }

    /// RMSE and SSIM of a raw (unnormalized) volume.
    pub fn measure(&self, vol: &VoxelVolume) -> Result<(f64, f64), MetricsError> {
        let v = normalize(vol)?;
        Ok((rmse(&self.reference, &v, &self.mask)?, ssim(&self.reference, &v, &self.mask)?))
    }

    /// Reports for the uncorrected arm followed by the other arms, with
    /// improvements relative to the uncorrected one.
    pub fn compare(&self, uncorrected: &VoxelVolume, arms: &[(&str, &VoxelVolume)]) -> Result<Vec<QualityReport>, MetricsError> {
        let (ur, us) = self.measure(uncorrected)?;
        let n = self.mask.count();
        let mut out = vec![QualityReport {
            arm: "uncorrected".into(),
            rmse: ur,
            ssim: us,
            mask_voxels: n,
            rmse_improvement_pct: 0.0,
            ssim_improvement_pct: 0.0,
        }];
        for (name, vol) in arms {
            let (r, s) = self.measure(vol)?;
            out.push(QualityReport {
                arm: name.to_string(),
                rmse: r,
                ssim: s,
                mask_voxels: n,
                rmse_improvement_pct: rmse_improvement(ur, r),
                ssim_improvement_pct: ssim_improvement(us, s),
            });
        }
        Ok(out)
    }
}
