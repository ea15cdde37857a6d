//! Incomplete field-of-view machinery: cutoff simulation on the
//! inferior-superior axis, acquired-region masks, and QA estimation of the
//! missing-slab thickness against a brain mask.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dwi::{Volume3D, Volume4D};
use crate::error::{FovxError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CutSide {
    Top,
    Bottom,
    None,
}

impl CutSide {
    pub fn name(&self) -> &'static str {
        match self {
            CutSide::Top => "top",
            CutSide::Bottom => "bottom",
            CutSide::None => "none",
        }
    }
}

/// Descriptor of a simulated (or estimated) FOV cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FovCut {
    pub side: CutSide,
    pub extent_mm: f64,
    /// Half-open slice interval on the inferior-superior axis that is missing.
    pub slice_range: (usize, usize),
}

impl FovCut {
    pub fn none() -> Self {
        Self { side: CutSide::None, extent_mm: 0.0, slice_range: (0, 0) }
    }

    pub fn n_slices(&self) -> usize {
        self.slice_range.1 - self.slice_range.0
    }
}

/// Binary acquired-region mask on the grid of a companion volume
/// (1 = acquired, 0 = missing).
#[derive(Debug, Clone, PartialEq)]
pub struct Mask3D {
    pub dims: (usize, usize, usize),
    pub spacing: (f32, f32, f32),
    pub affine: crate::dwi::Affine4,
    pub data: Array3<u8>,
}

impl Mask3D {
    pub fn ones_like(v: &Volume3D) -> Self {
        Self {
            dims: v.dims,
            spacing: v.spacing,
            affine: v.affine,
            data: Array3::ones(v.dims),
        }
    }

    pub fn zeros_like(v: &Volume3D) -> Self {
        Self {
            dims: v.dims,
            spacing: v.spacing,
            affine: v.affine,
            data: Array3::zeros(v.dims),
        }
    }

    pub fn from_volume_threshold(v: &Volume3D, threshold: f32) -> Self {
        let mut m = Self::zeros_like(v);
        for (out, &x) in m.data.iter_mut().zip(v.data.iter()) {
            *out = u8::from(x > threshold);
        }
        m
    }

    /// Carrier volume (0.0 / 1.0 values) for I/O and resampling.
    pub fn to_volume(&self) -> Volume3D {
        Volume3D {
            dims: self.dims,
            spacing: self.spacing,
            affine: self.affine,
            data: self.data.mapv(|x| x as f32),
        }
    }

    pub fn from_volume(v: &Volume3D) -> Result<Self> {
        if v.data.iter().any(|&x| x != 0.0 && x != 1.0) {
            return Err(FovxError::Validation("mask volume is not binary".into()));
        }
        Ok(Self {
            dims: v.dims,
            spacing: v.spacing,
            affine: v.affine,
            data: v.data.mapv(|x| x as u8),
        })
    }

    pub fn same_grid(&self, other: &Mask3D) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&x| x == 1).count()
    }
}

/// Zero out `extent_mm` of slices from the top or bottom of the grid on the
/// inferior-superior axis, in every volume. The extent is rounded to the
/// nearest whole slice.
pub fn simulate_cutoff(
    study: &Volume4D,
    extent_mm: f64,
    side: CutSide,
) -> Result<(Volume4D, FovCut, Mask3D)> {
    let grid = study.grid();
    let nz = grid.dims.2;
    let dz = grid.spacing.2 as f64;
    if extent_mm < 0.0 {
        return Err(FovxError::Validation("cut extent must be >= 0".into()));
    }
    let n_slices = (extent_mm / dz).round() as usize;
    if n_slices > nz {
        return Err(FovxError::Validation(format!(
            "cut extent {extent_mm} mm exceeds grid extent {} mm",
            nz as f64 * dz
        )));
    }
    let range = match side {
        CutSide::None => (0, 0),
        _ if n_slices == 0 => (0, 0),
        CutSide::Top => (nz - n_slices, nz),
        CutSide::Bottom => (0, n_slices),
    };
    let cut = FovCut {
        side: if range.0 == range.1 { CutSide::None } else { side },
        extent_mm,
        slice_range: range,
    };
    let mut out = study.clone();
    for v in &mut out.volumes {
        for k in range.0..range.1 {
            v.data.index_axis_mut(ndarray::Axis(2), k).fill(0.0);
        }
    }
    let mut mask = Mask3D::ones_like(grid);
    for k in range.0..range.1 {
        mask.data.index_axis_mut(ndarray::Axis(2), k).fill(0);
    }
    Ok((out, cut, mask))
}

/// Draw a training cutoff: extent ~ U[lo, hi] mm, side ~ U{top, bottom}.
pub fn draw_training_cut<R: Rng>(rng: &mut R, extent_range_mm: (f64, f64)) -> (f64, CutSide) {
    let extent = rng.gen_range(extent_range_mm.0..=extent_range_mm.1);
    let side = if rng.gen_bool(0.5) { CutSide::Top } else { CutSide::Bottom };
    (extent, side)
}

fn median_filter_3(v: &Array3<f32>) -> Array3<f32> {
    let (nx, ny, nz) = v.dim();
    let mut out = Array3::zeros((nx, ny, nz));
    let mut buf = [0f32; 27];
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                let mut n = 0;
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        for dk in -1i64..=1 {
                            let (a, b, c) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                            if a >= 0
                                && b >= 0
                                && c >= 0
                                && (a as usize) < nx
                                && (b as usize) < ny
                                && (c as usize) < nz
                            {
                                buf[n] = v[[a as usize, b as usize, c as usize]];
                                n += 1;
                            }
                        }
                    }
                }
                buf[..n].sort_by(|x, y| x.partial_cmp(y).unwrap());
                out[[i, j, k]] = buf[n / 2];
            }
        }
    }
    out
}

/// Otsu threshold over a 1D sample using a 256-bin histogram. Returns a
/// threshold value; samples strictly above it are foreground.
fn otsu_threshold(values: &[f64]) -> f64 {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return lo - 1.0; // constant input: everything is foreground
    }
    const BINS: usize = 256;
    let mut hist = [0usize; BINS];
    let scale = (BINS as f64 - 1.0) / (hi - lo);
    for &v in values {
        let b = (((v - lo) * scale).round() as usize).min(BINS - 1);
        hist[b] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let mut w_bg = 0.0;
    let mut sum_bg = 0.0;
    let mut best = (0.0, 0usize);
    for t in 0..BINS - 1 {
        w_bg += hist[t] as f64;
        if w_bg == 0.0 {
            continue;
        }
        let w_fg = total - w_bg;
        if w_fg == 0.0 {
            break;
        }
        sum_bg += t as f64 * hist[t] as f64;
        let mu_bg = sum_bg / w_bg;
        let mu_fg = (sum_all - sum_bg) / w_fg;
        let between = w_bg * w_fg * (mu_bg - mu_fg) * (mu_bg - mu_fg);
        if between > best.0 {
            best = (between, t);
        }
    }
    lo + best.1 as f64 / scale
}

/// Compute the acquired-region mask of a normalized study. A slice on the
/// inferior-superior axis is acquired iff its mean intensity (over the mean
/// b0 image after 3^3 median filtering) exceeds an Otsu threshold computed
/// over all slice means; the mask is constant per slice.
pub fn compute_acquired_mask(study: &Volume4D) -> Mask3D {
    let grid = study.grid();
    // mean b0 volume; fall back to the mean of all volumes when the gradient
    // table is absent or has no b0 entries
    let b0_idx: Vec<usize> = if study.gradient.is_empty() {
        (0..study.len()).collect()
    } else {
        let idx: Vec<usize> = study
            .gradient
            .bvals
            .iter()
            .enumerate()
            .filter(|(_, &b)| b <= 50.0)
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            (0..study.len()).collect()
        } else {
            idx
        }
    };
    let mut mean = Array3::<f32>::zeros(grid.dims);
    for &i in &b0_idx {
        mean += &study.volumes[i].data;
    }
    mean.mapv_inplace(|x| x / b0_idx.len() as f32);
    let filtered = median_filter_3(&mean);
    let nz = grid.dims.2;
    let slice_means: Vec<f64> = (0..nz)
        .map(|k| {
            let s = filtered.index_axis(ndarray::Axis(2), k);
            s.iter().map(|&x| x as f64).sum::<f64>() / s.len() as f64
        })
        .collect();
    let max_mean = slice_means.iter().cloned().fold(0.0f64, f64::max);
    let mut mask = Mask3D::zeros_like(grid);
    if max_mean <= 0.0 {
        return mask; // fully-missing data
    }
    let thresh = otsu_threshold(&slice_means);
    // zero-filled cutoff slices have (filtered) means of essentially zero;
    // requiring near-zero as well keeps Otsu from splitting the natural
    // slice-mean variation of a fully acquired study
    let floor = 1e-3 * max_mean;
    for (k, &m) in slice_means.iter().enumerate() {
        if m > thresh || m > floor {
            mask.data.index_axis_mut(ndarray::Axis(2), k).fill(1);
        }
    }
    mask
}

fn slice_any(mask: &Mask3D, k: usize) -> bool {
    mask.data
        .index_axis(ndarray::Axis(2), k)
        .iter()
        .any(|&x| x == 1)
}

/// Estimate the missing-slab thickness in mm: the distance from the
/// acquired-region boundary to the farthest brain voxel beyond it, computed
/// separately for top and bottom and summed. Returns (total_mm, side).
pub fn estimate_cutoff_thickness(acquired: &Mask3D, t1_brain: &Mask3D) -> Result<(f64, CutSide)> {
    if !acquired.same_grid(t1_brain) {
        return Err(FovxError::Geometry(
            "acquired mask and brain mask are on different grids".into(),
        ));
    }
    let nz = acquired.dims.2;
    let dz = acquired.spacing.2 as f64;
    let brain: Vec<bool> = (0..nz).map(|k| slice_any(t1_brain, k)).collect();
    let acq: Vec<bool> = (0..nz).map(|k| slice_any(acquired, k)).collect();
    let brain_lo = brain.iter().position(|&b| b);
    let brain_hi = brain.iter().rposition(|&b| b);
    let (brain_lo, brain_hi) = match (brain_lo, brain_hi) {
        (Some(a), Some(b)) => (a, b),
        _ => return Ok((0.0, CutSide::None)), // no brain
    };
    let acq_lo = acq.iter().position(|&b| b);
    let acq_hi = acq.iter().rposition(|&b| b);
    let (top_missing, bottom_missing) = match (acq_lo, acq_hi) {
        (Some(lo), Some(hi)) => (
            if brain_hi > hi { brain_hi - hi } else { 0 },
            if brain_lo < lo { lo - brain_lo } else { 0 },
        ),
        _ => (brain_hi - brain_lo + 1, 0), // nothing acquired: whole brain missing
    };
    let total = (top_missing + bottom_missing) as f64 * dz;
    let side = match (top_missing > 0, bottom_missing > 0) {
        (true, false) => CutSide::Top,
        (false, true) => CutSide::Bottom,
        (false, false) => CutSide::None,
        (true, true) => {
            if top_missing >= bottom_missing {
                CutSide::Top
            } else {
                CutSide::Bottom
            }
        }
    };
    Ok((total, side))
}
