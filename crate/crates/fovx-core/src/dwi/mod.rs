//! Core volumetric data model: gridded volumes, gradient tables, shell and
//! plane tags, and the NIfTI-1 / bval / bvec / affine file conventions.

mod gradient;
mod nifti;

pub use gradient::{read_affine_text, read_gradient_table, write_affine_text, write_gradient_table};
pub use nifti::{read_nifti, write_nifti, write_nifti_3d, write_nifti_4d, NiftiImage};

use crate::error::{FovxError, Result};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

/// 4x4 voxel-index -> world-mm matrix, row major.
pub type Affine4 = [[f64; 4]; 4];

pub const IDENTITY_AFFINE: Affine4 = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

pub fn affine_mul(a: &Affine4, b: &Affine4) -> Affine4 {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            out[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn affine_apply(a: &Affine4, p: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = a[i][0] * p[0] + a[i][1] * p[1] + a[i][2] * p[2] + a[i][3];
    }
    out
}

fn det3(a: &Affine4) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Invert an affine matrix (last row assumed [0,0,0,1]).
pub fn affine_invert(a: &Affine4) -> Result<Affine4> {
    let d = det3(a);
    if d.abs() < 1e-12 {
        return Err(FovxError::Geometry("affine is singular".into()));
    }
    let inv_d = 1.0 / d;
    let m = a;
    let mut r = [[0.0; 4]; 4];
    r[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv_d;
    r[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_d;
    r[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_d;
    r[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv_d;
    r[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_d;
    r[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_d;
    r[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv_d;
    r[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_d;
    r[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_d;
    for i in 0..3 {
        r[i][3] = -(r[i][0] * m[0][3] + r[i][1] * m[1][3] + r[i][2] * m[2][3]);
    }
    r[3] = [0.0, 0.0, 0.0, 1.0];
    Ok(r)
}

/// A dense 3D scalar field with spacing and a voxel->world affine.
///
/// Data is stored as `Array3<f32>` indexed `[i, j, k]` where `i` is the
/// left-right axis, `j` anterior-posterior, `k` inferior-superior on the
/// normalized grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    pub dims: (usize, usize, usize),
    pub spacing: (f32, f32, f32),
    pub affine: Affine4,
    pub data: Array3<f32>,
}

impl Volume3D {
    pub fn new(
        dims: (usize, usize, usize),
        spacing: (f32, f32, f32),
        affine: Affine4,
        data: Array3<f32>,
    ) -> Result<Self> {
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
            return Err(FovxError::Validation("volume dims must be positive".into()));
        }
        if spacing.0 <= 0.0 || spacing.1 <= 0.0 || spacing.2 <= 0.0 {
            return Err(FovxError::Validation("voxel spacing must be positive".into()));
        }
        if det3(&affine).abs() <= 0.0 {
            return Err(FovxError::Geometry("affine 3x3 block is singular".into()));
        }
        if data.dim() != dims {
            return Err(FovxError::Validation(format!(
                "data shape {:?} does not match dims {:?}",
                data.dim(),
                dims
            )));
        }
        Ok(Self { dims, spacing, affine, data })
    }

    /// Zero-filled volume on the given grid.
    pub fn zeros(dims: (usize, usize, usize), spacing: (f32, f32, f32), affine: Affine4) -> Self {
        Self {
            dims,
            spacing,
            affine,
            data: Array3::zeros(dims),
        }
    }

    pub fn same_grid(&self, other: &Volume3D) -> bool {
        self.dims == other.dims
            && self.spacing == other.spacing
            && affine_close(&self.affine, &other.affine)
    }

    /// World coordinate of the geometric volume center.
    pub fn center_world(&self) -> [f64; 3] {
        affine_apply(
            &self.affine,
            [
                (self.dims.0 as f64 - 1.0) / 2.0,
                (self.dims.1 as f64 - 1.0) / 2.0,
                (self.dims.2 as f64 - 1.0) / 2.0,
            ],
        )
    }
}

pub fn affine_close(a: &Affine4, b: &Affine4) -> bool {
    for i in 0..4 {
        for j in 0..4 {
            if (a[i][j] - b[i][j]).abs() > 1e-4 {
                return false;
            }
        }
    }
    true
}

/// An ordered stack of 3D volumes on one grid plus the gradient table.
///
/// `read_nifti` produces a 4D image with an empty gradient table; the table
/// is attached separately once bval/bvec files are parsed.
#[derive(Debug, Clone)]
pub struct Volume4D {
    pub volumes: Vec<Volume3D>,
    pub gradient: GradientTable,
}

impl Volume4D {
    pub fn new(volumes: Vec<Volume3D>, gradient: GradientTable) -> Result<Self> {
        if volumes.is_empty() {
            return Err(FovxError::Validation("4D volume needs at least one volume".into()));
        }
        let first = &volumes[0];
        for v in &volumes[1..] {
            if !first.same_grid(v) {
                return Err(FovxError::Geometry("4D volumes must share one grid".into()));
            }
        }
        if !gradient.is_empty() && gradient.len() != volumes.len() {
            return Err(FovxError::Validation(format!(
                "gradient table length {} != volume count {}",
                gradient.len(),
                volumes.len()
            )));
        }
        Ok(Self { volumes, gradient })
    }

    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    pub fn with_gradient(mut self, gradient: GradientTable) -> Result<Self> {
        if gradient.len() != self.volumes.len() {
            return Err(FovxError::Validation(format!(
                "gradient table length {} != volume count {}",
                gradient.len(),
                self.volumes.len()
            )));
        }
        self.gradient = gradient;
        Ok(self)
    }

    pub fn grid(&self) -> &Volume3D {
        &self.volumes[0]
    }
}

/// Per-volume b-values (s/mm^2) and unit b-vectors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientTable {
    pub bvals: Vec<f64>,
    pub bvecs: Vec<[f64; 3]>,
}

impl GradientTable {
    pub fn new(bvals: Vec<f64>, bvecs: Vec<[f64; 3]>, b0_threshold: f64) -> Result<Self> {
        if bvals.len() != bvecs.len() {
            return Err(FovxError::Format(format!(
                "bvals count {} != bvecs count {}",
                bvals.len(),
                bvecs.len()
            )));
        }
        for (i, (&b, g)) in bvals.iter().zip(&bvecs).enumerate() {
            if b < 0.0 {
                return Err(FovxError::Validation(format!("negative b-value at index {i}")));
            }
            let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            if b > b0_threshold {
                if (norm - 1.0).abs() > 1e-3 {
                    return Err(FovxError::Validation(format!(
                        "b-vector at index {i} has norm {norm}, expected unit"
                    )));
                }
            }
        }
        Ok(Self { bvals, bvecs })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.bvals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bvals.is_empty()
    }
}

/// Shell tag for generator dispatch. The study supports exactly two shells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ShellId {
    B0,
    B1300,
}

impl ShellId {
    pub fn name(&self) -> &'static str {
        match self {
            ShellId::B0 => "b0",
            ShellId::B1300 => "b1300",
        }
    }
}

/// Anatomical plane. Only sagittal and coronal are generator dispatch keys;
/// axial exists as an evaluation view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Plane {
    Sagittal,
    Coronal,
    Axial,
}

impl Plane {
    /// Grid axis the plane's slices are orthogonal to: sagittal = i
    /// (left-right), coronal = j (anterior-posterior), axial = k
    /// (inferior-superior, the cut axis).
    pub fn axis(&self) -> usize {
        match self {
            Plane::Sagittal => 0,
            Plane::Coronal => 1,
            Plane::Axial => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Plane::Sagittal => "sagittal",
            Plane::Coronal => "coronal",
            Plane::Axial => "axial",
        }
    }
}

/// Shell classification thresholds. The paper names only nominal shells 0
/// and 1300 s/mm^2; scanners report jittered values, so both windows are
/// configurable.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ShellConfig {
    pub b0_threshold: f64,
    pub shell_tolerance: f64,
}

impl Default for ShellConfig {
    fn default() -> Self {
        Self { b0_threshold: 50.0, shell_tolerance: 100.0 }
    }
}

/// Map a b-value to its shell; anything outside both windows is an error
/// rather than being silently bucketed.
pub fn classify_shell(b: f64, cfg: &ShellConfig) -> Result<ShellId> {
    if b < 0.0 {
        return Err(FovxError::Validation(format!("negative b-value {b}")));
    }
    if b <= cfg.b0_threshold {
        Ok(ShellId::B0)
    } else if (b - 1300.0).abs() <= cfg.shell_tolerance {
        Ok(ShellId::B1300)
    } else {
        Err(FovxError::Unsupported(format!(
            "b-value {b} s/mm^2 is outside the supported b0/b1300 windows"
        )))
    }
}
