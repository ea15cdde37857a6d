//! Intensity normalization and resampling onto the shared 1mm grid.
//!
//! Normalization clamps to [0, p999] and divides by p999, where p999 is the
//! nearest-rank 99.9th percentile over the whole image (all volumes jointly
//! for a DWI study). Resampling maps target voxel centers through the target
//! affine and the inverse source affine; samples outside the source volume
//! are 0 (air).

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dwi::{affine_invert, affine_mul, Affine4, Volume3D, Volume4D};
use crate::error::{FovxError, Result};

/// Per-image normalization snapshot: output = clamp(x, 0, p999) / p999.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub p999: f32,
    pub floor: f32,
}

/// Target grid geometry for resampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: (usize, usize, usize),
    pub spacing: (f32, f32, f32),
    pub affine: Affine4,
}

impl GridSpec {
    pub fn of_volume(v: &Volume3D) -> Self {
        Self { dims: v.dims, spacing: v.spacing, affine: v.affine }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMode {
    Trilinear,
    Nearest,
}

/// Nearest-rank percentile (q in (0,1]) over a value set.
fn nearest_rank_percentile(values: &mut Vec<f32>, q: f64) -> f32 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    values[rank - 1]
}

fn normalize_slice(data: &mut Array3<f32>, p999: f32) {
    data.mapv_inplace(|x| (x.clamp(0.0, p999)) / p999);
}

/// Normalize a whole DWI study; every volume shares one parameter set
/// computed over all voxels of all volumes jointly.
pub fn normalize_intensity(study: &Volume4D) -> Result<(Volume4D, NormalizationParams)> {
    let mut all: Vec<f32> = study
        .volumes
        .iter()
        .flat_map(|v| v.data.iter().copied())
        .collect();
    if !all.iter().any(|&x| x > 0.0) {
        return Err(FovxError::Validation(
            "degenerate input: study has no positive voxel".into(),
        ));
    }
    let p999 = nearest_rank_percentile(&mut all, 0.999);
    if p999 <= 0.0 {
        return Err(FovxError::Validation(
            "degenerate input: 99.9th percentile is not positive".into(),
        ));
    }
    let mut out = study.clone();
    for v in &mut out.volumes {
        normalize_slice(&mut v.data, p999);
    }
    Ok((out, NormalizationParams { p999, floor: 0.0 }))
}

/// Normalize a single 3D image (T1) with its own parameter set.
pub fn normalize_t1(t1: &Volume3D) -> Result<(Volume3D, NormalizationParams)> {
    let mut all: Vec<f32> = t1.data.iter().copied().collect();
    if !all.iter().any(|&x| x > 0.0) {
        return Err(FovxError::Validation(
            "degenerate input: image has no positive voxel".into(),
        ));
    }
    let p999 = nearest_rank_percentile(&mut all, 0.999);
    if p999 <= 0.0 {
        return Err(FovxError::Validation(
            "degenerate input: 99.9th percentile is not positive".into(),
        ));
    }
    let mut out = t1.clone();
    normalize_slice(&mut out.data, p999);
    Ok((out, NormalizationParams { p999, floor: 0.0 }))
}

/// Undo normalization (multiply by p999). Clamped content stays clamped.
pub fn denormalize(vol: &Volume3D, params: &NormalizationParams) -> Volume3D {
    let mut out = vol.clone();
    out.data.mapv_inplace(|x| x * params.p999);
    out
}

#[inline]
fn sample_trilinear(data: &Array3<f32>, x: f64, y: f64, z: f64) -> f32 {
    let (nx, ny, nz) = data.dim();
    // Entirely outside the source volume -> background.
    if x < 0.0 || y < 0.0 || z < 0.0 {
        return 0.0;
    }
    if x > (nx - 1) as f64 || y > (ny - 1) as f64 || z > (nz - 1) as f64 {
        return 0.0;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let z0 = z.floor() as usize;
    let x1 = (x0 + 1).min(nx - 1);
    let y1 = (y0 + 1).min(ny - 1);
    let z1 = (z0 + 1).min(nz - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let fz = z - z0 as f64;
    let c000 = data[[x0, y0, z0]] as f64;
    let c100 = data[[x1, y0, z0]] as f64;
    let c010 = data[[x0, y1, z0]] as f64;
    let c110 = data[[x1, y1, z0]] as f64;
    let c001 = data[[x0, y0, z1]] as f64;
    let c101 = data[[x1, y0, z1]] as f64;
    let c011 = data[[x0, y1, z1]] as f64;
    let c111 = data[[x1, y1, z1]] as f64;
    let c00 = c000 * (1.0 - fx) + c100 * fx;
    let c10 = c010 * (1.0 - fx) + c110 * fx;
    let c01 = c001 * (1.0 - fx) + c101 * fx;
    let c11 = c011 * (1.0 - fx) + c111 * fx;
    let c0 = c00 * (1.0 - fy) + c10 * fy;
    let c1 = c01 * (1.0 - fy) + c11 * fy;
    (c0 * (1.0 - fz) + c1 * fz) as f32
}

#[inline]
fn sample_nearest(data: &Array3<f32>, x: f64, y: f64, z: f64) -> f32 {
    let (nx, ny, nz) = data.dim();
    let xi = x.round();
    let yi = y.round();
    let zi = z.round();
    if xi < 0.0 || yi < 0.0 || zi < 0.0 {
        return 0.0;
    }
    let (xi, yi, zi) = (xi as usize, yi as usize, zi as usize);
    if xi >= nx || yi >= ny || zi >= nz {
        return 0.0;
    }
    data[[xi, yi, zi]]
}

/// Resample a volume onto a target grid.
pub fn resample(vol: &Volume3D, target: &GridSpec, mode: ResampleMode) -> Result<Volume3D> {
    let src_inv = affine_invert(&vol.affine)?;
    let map = affine_mul(&src_inv, &target.affine);
    let (ti, tj, tk) = target.dims;
    let mut data = Array3::zeros((ti, tj, tk));
    // target voxel (i,j,k) -> source voxel index via a single composed affine
    data.indexed_iter_mut()
        .for_each(|((i, j, k), out)| {
            let (fi, fj, fk) = (i as f64, j as f64, k as f64);
            let x = map[0][0] * fi + map[0][1] * fj + map[0][2] * fk + map[0][3];
            let y = map[1][0] * fi + map[1][1] * fj + map[1][2] * fk + map[1][3];
            let z = map[2][0] * fi + map[2][1] * fj + map[2][2] * fk + map[2][3];
            *out = match mode {
                ResampleMode::Trilinear => sample_trilinear(&vol.data, x, y, z),
                ResampleMode::Nearest => sample_nearest(&vol.data, x, y, z),
            };
        });
    Volume3D::new(target.dims, target.spacing, target.affine, data)
}

/// Axis-aligned 1mm (by default) grid centered on the given world point.
pub fn centered_grid(dims: (usize, usize, usize), spacing: (f32, f32, f32), center: [f64; 3]) -> GridSpec {
    let half = [
        (dims.0 as f64 - 1.0) / 2.0 * spacing.0 as f64,
        (dims.1 as f64 - 1.0) / 2.0 * spacing.1 as f64,
        (dims.2 as f64 - 1.0) / 2.0 * spacing.2 as f64,
    ];
    let affine: Affine4 = [
        [spacing.0 as f64, 0.0, 0.0, center[0] - half[0]],
        [0.0, spacing.1 as f64, 0.0, center[1] - half[1]],
        [0.0, 0.0, spacing.2 as f64, center[2] - half[2]],
        [0.0, 0.0, 0.0, 1.0],
    ];
    GridSpec { dims, spacing, affine }
}

/// Resample a study and its T1 onto a shared normalized grid (1mm spacing,
/// configurable dims) centered on the DWI volume center. `reg_affine` maps
/// T1 world coordinates to DWI world coordinates and is composed into the
/// T1 resampling; pass identity when the images are already aligned.
pub fn to_normalized_space(
    study: &Volume4D,
    t1: &Volume3D,
    reg_affine: &Affine4,
    grid_dims: (usize, usize, usize),
) -> Result<(Volume4D, Volume3D, GridSpec)> {
    let center = study.grid().center_world();
    let grid = centered_grid(grid_dims, (1.0, 1.0, 1.0), center);
    let volumes: Vec<Volume3D> = study
        .volumes
        .par_iter()
        .map(|v| resample(v, &grid, ResampleMode::Trilinear))
        .collect::<Result<_>>()?;
    let study_out = Volume4D::new(volumes, study.gradient.clone())?;
    // T1 voxel -> T1 world -> (registration) -> DWI world
    let mut t1_world = t1.clone();
    t1_world.affine = affine_mul(reg_affine, &t1.affine);
    let t1_out = resample(&t1_world, &grid, ResampleMode::Trilinear)?;
    Ok((study_out, t1_out, grid))
}

/// Map an imputed normalized-space volume back onto the subject grid.
pub fn from_normalized_space(imputed: &Volume3D, subject_grid: &GridSpec) -> Result<Volume3D> {
    resample(imputed, subject_grid, ResampleMode::Trilinear)
}
