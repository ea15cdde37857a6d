//! 2.5D slab extraction, per-slice prediction reassembly, cross-plane
//! fusion, and masked compositing.
//!
//! Axis convention: sagittal slices are orthogonal to i (left-right),
//! coronal to j (anterior-posterior); the cut axis is k (inferior-superior).
//! Slab channels are the DWI block first, then the aligned T1 block, each
//! 2n+1 slices with replicate clamping at volume boundaries.

use ndarray::{Array2, Array3, Axis};

use crate::dwi::{Plane, Volume3D};
use crate::error::{FovxError, Result};
use crate::fov::Mask3D;
use crate::preprocess::GridSpec;

/// A stack of 2(2n+1) aligned 2D slices: 2n+1 DWI then 2n+1 T1.
#[derive(Debug, Clone)]
pub struct SlabPatch {
    /// (channels, H, W)
    pub channels: Array3<f32>,
    pub plane: Plane,
    pub center_index: usize,
    pub n: usize,
}

impl SlabPatch {
    pub fn channel_count(&self) -> usize {
        self.channels.dim().0
    }
}

fn plane_slice(vol: &Volume3D, plane: Plane, index: usize) -> Array2<f32> {
    vol.data.index_axis(Axis(plane.axis()), index).to_owned()
}

fn plane_dim(vol: &Volume3D, plane: Plane) -> usize {
    match plane.axis() {
        0 => vol.dims.0,
        1 => vol.dims.1,
        _ => vol.dims.2,
    }
}

/// Extract the 2(2n+1)-channel slab centered on `center_index`.
pub fn extract_slab(
    dwi_vol: &Volume3D,
    t1: &Volume3D,
    plane: Plane,
    center_index: usize,
    n: usize,
) -> Result<SlabPatch> {
    if !dwi_vol.same_grid(t1) {
        return Err(FovxError::Geometry("DWI and T1 are on different grids".into()));
    }
    if n < 1 {
        return Err(FovxError::Validation("slab half-width n must be >= 1".into()));
    }
    let dim = plane_dim(dwi_vol, plane);
    if center_index >= dim {
        return Err(FovxError::Validation(format!(
            "center index {center_index} out of bounds for plane dim {dim}"
        )));
    }
    let width = 2 * n + 1;
    let first = plane_slice(dwi_vol, plane, center_index);
    let (h, w) = first.dim();
    let mut channels = Array3::zeros((2 * width, h, w));
    for off in 0..width {
        let rel = off as i64 - n as i64;
        let idx = (center_index as i64 + rel).clamp(0, dim as i64 - 1) as usize;
        channels
            .index_axis_mut(Axis(0), off)
            .assign(&plane_slice(dwi_vol, plane, idx));
        channels
            .index_axis_mut(Axis(0), width + off)
            .assign(&plane_slice(t1, plane, idx));
    }
    Ok(SlabPatch { channels, plane, center_index, n })
}

/// Stack one predicted slice per index back into a volume on `grid`.
/// `None` at any index is a completeness error.
pub fn assemble_plane(
    predicted_slices: &[Option<Array2<f32>>],
    plane: Plane,
    grid: &GridSpec,
) -> Result<Volume3D> {
    let dim = match plane.axis() {
        0 => grid.dims.0,
        1 => grid.dims.1,
        _ => grid.dims.2,
    };
    if predicted_slices.len() != dim {
        return Err(FovxError::Validation(format!(
            "expected {dim} predicted slices, got {}",
            predicted_slices.len()
        )));
    }
    let mut out = Volume3D::zeros(grid.dims, grid.spacing, grid.affine);
    for (idx, slice) in predicted_slices.iter().enumerate() {
        let slice = slice.as_ref().ok_or_else(|| {
            FovxError::Validation(format!("missing predicted slice at index {idx}"))
        })?;
        let mut target = out.data.index_axis_mut(Axis(plane.axis()), idx);
        if target.dim() != slice.dim() {
            return Err(FovxError::Shape(format!(
                "slice {idx} has shape {:?}, expected {:?}",
                slice.dim(),
                target.dim()
            )));
        }
        target.assign(slice);
    }
    Ok(out)
}

/// Voxelwise arithmetic mean of the sagittal and coronal predictions.
pub fn fuse_planes(sag: &Volume3D, cor: &Volume3D) -> Result<Volume3D> {
    if !sag.same_grid(cor) {
        return Err(FovxError::Geometry("fusion inputs are on different grids".into()));
    }
    let mut out = sag.clone();
    for (o, &c) in out.data.iter_mut().zip(cor.data.iter()) {
        *o = (*o + c) / 2.0;
    }
    Ok(out)
}

/// Masked compositing: m * x + (1 - m) * y_hat. Acquired voxels (m = 1)
/// are bit-identical to `x_v`.
pub fn composite_output(x_v: &Volume3D, y_hat: &Volume3D, m: &Mask3D) -> Result<Volume3D> {
    if !x_v.same_grid(y_hat) || x_v.dims != m.dims {
        return Err(FovxError::Geometry("compositing inputs are on different grids".into()));
    }
    if m.data.iter().any(|&b| b > 1) {
        return Err(FovxError::Validation("compositing mask is not binary".into()));
    }
    let mut out = x_v.clone();
    for ((o, &p), &b) in out.data.iter_mut().zip(y_hat.data.iter()).zip(m.data.iter()) {
        if b == 0 {
            *o = p;
        }
    }
    Ok(out)
}
