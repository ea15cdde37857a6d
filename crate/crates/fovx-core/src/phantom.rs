//! Synthetic tensor-field phantoms: an ellipsoidal brain with concentric
//! CSF/GM/WM shells plus anisotropic fiber cylinders, a matching T1 image,
//! and closed-form DWI simulation S = S0 * exp(-b * g'Dg) with optional
//! Rician-style noise.
//!
//! Tissue boundaries carry a one-voxel linear ramp so trilinear round-trip
//! tolerances hold downstream.

use std::collections::BTreeMap;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dwi::{GradientTable, Volume3D, Volume4D, IDENTITY_AFFINE};
use crate::error::{FovxError, Result};
use crate::fov::Mask3D;

/// Voxelwise symmetric diffusion tensor field (mm^2/s) with companion S0.
#[derive(Debug, Clone)]
pub struct TensorField {
    pub dxx: Array3<f64>,
    pub dyy: Array3<f64>,
    pub dzz: Array3<f64>,
    pub dxy: Array3<f64>,
    pub dxz: Array3<f64>,
    pub dyz: Array3<f64>,
}

impl TensorField {
    pub fn zeros(dims: (usize, usize, usize)) -> Self {
        Self {
            dxx: Array3::zeros(dims),
            dyy: Array3::zeros(dims),
            dzz: Array3::zeros(dims),
            dxy: Array3::zeros(dims),
            dxz: Array3::zeros(dims),
            dyz: Array3::zeros(dims),
        }
    }

    /// Quadratic form g' D g at one voxel.
    pub fn quad_form(&self, idx: (usize, usize, usize), g: &[f64; 3]) -> f64 {
        let i = [idx.0, idx.1, idx.2];
        let (gx, gy, gz) = (g[0], g[1], g[2]);
        gx * gx * self.dxx[i]
            + gy * gy * self.dyy[i]
            + gz * gz * self.dzz[i]
            + 2.0 * (gx * gy * self.dxy[i] + gx * gz * self.dxz[i] + gy * gz * self.dyz[i])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: (usize, usize, usize),
    pub spacing: (f32, f32, f32),
    /// Ellipsoid brain semi-axes in mm (before per-seed jitter).
    pub semi_axes_mm: [f64; 3],
    /// Mean diffusivities, mm^2/s.
    pub csf_md: f64,
    pub gm_md: f64,
    pub wm_md: f64,
    /// Fiber cylinder eigenvalues, mm^2/s.
    pub cyl_axial_diff: f64,
    pub cyl_radial_diff: f64,
    pub cyl_radius_mm: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub n_directions: usize,
    pub bval: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: (64, 64, 64),
            spacing: (1.0, 1.0, 1.0),
            semi_axes_mm: [22.0, 26.0, 24.0],
            csf_md: 3.0e-3,
            gm_md: 0.8e-3,
            wm_md: 0.7e-3,
            cyl_axial_diff: 1.7e-3,
            cyl_radial_diff: 0.3e-3,
            cyl_radius_mm: 4.0,
            noise_sigma: 0.0,
            seed: 0,
            n_directions: 40,
            bval: 1300.0,
        }
    }
}

/// A generated phantom: T1 image, tensor field + S0, and named structure
/// masks ("brain", "csf", "gm", "wm", "cylinder1", "cylinder2").
#[derive(Debug, Clone)]
pub struct Phantom {
    pub t1: Volume3D,
    pub tensors: TensorField,
    pub s0: Volume3D,
    pub structure_masks: BTreeMap<String, Mask3D>,
}

/// 0 below `edge - w/2`, 1 above `edge + w/2`, linear between.
#[inline]
fn ramp(x: f64, edge: f64, w: f64) -> f64 {
    ((x - edge) / w + 0.5).clamp(0.0, 1.0)
}

struct Cylinder {
    /// A point on the axis, world mm.
    p0: [f64; 3],
    /// Unit axis direction.
    u: [f64; 3],
    radius: f64,
}

impl Cylinder {
    fn dist(&self, p: [f64; 3]) -> f64 {
        let d = [p[0] - self.p0[0], p[1] - self.p0[1], p[2] - self.p0[2]];
        let t = d[0] * self.u[0] + d[1] * self.u[1] + d[2] * self.u[2];
        let r = [d[0] - t * self.u[0], d[1] - t * self.u[1], d[2] - t * self.u[2]];
        (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt()
    }
}

/// T1 intensities per compartment; WM > GM > CSF by construction.
const T1_WM: f64 = 0.85;
const T1_GM: f64 = 0.6;
const T1_CSF: f64 = 0.25;

const S0_WM: f64 = 0.7;
const S0_GM: f64 = 0.8;
const S0_CSF: f64 = 1.0;
const S0_CYL: f64 = 0.7;

pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    let (nx, ny, nz) = spec.dims;
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(FovxError::Validation("phantom dims must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // per-seed jitter keeps phantoms distinct but deterministic
    let jitter = |rng: &mut ChaCha8Rng, scale: f64| rng.gen_range(-scale..=scale);
    let axes = [
        spec.semi_axes_mm[0] * (1.0 + jitter(&mut rng, 0.08)),
        spec.semi_axes_mm[1] * (1.0 + jitter(&mut rng, 0.08)),
        spec.semi_axes_mm[2] * (1.0 + jitter(&mut rng, 0.08)),
    ];
    let extent = [
        (nx - 1) as f64 * spec.spacing.0 as f64,
        (ny - 1) as f64 * spec.spacing.1 as f64,
        (nz - 1) as f64 * spec.spacing.2 as f64,
    ];
    for a in 0..3 {
        if 2.0 * axes[a] >= extent[a] {
            return Err(FovxError::Validation(format!(
                "brain semi-axis {} mm does not fit inside grid extent {} mm",
                axes[a], extent[a]
            )));
        }
    }
    let center = [
        extent[0] / 2.0 + jitter(&mut rng, 1.5),
        extent[1] / 2.0 + jitter(&mut rng, 1.5),
        extent[2] / 2.0 + jitter(&mut rng, 1.5),
    ];

    // cylinder 1 is vertical so a top cut always intersects it
    let cyl1 = Cylinder {
        p0: [center[0] + 7.0 + jitter(&mut rng, 1.5), center[1] + jitter(&mut rng, 1.5), center[2]],
        u: [0.0, 0.0, 1.0],
        radius: spec.cyl_radius_mm,
    };
    // cylinder 2 is tilted but still crosses every axial slice, so any cut
    // leaves part of it acquired; its axis differs from cylinder 1 to give
    // the tensor field genuine directional diversity
    let tilt = 0.35 + jitter(&mut rng, 0.1);
    let ang = jitter(&mut rng, std::f64::consts::PI);
    let cyl2 = Cylinder {
        p0: [center[0] - 5.0 + jitter(&mut rng, 1.5), center[1] - 6.0 + jitter(&mut rng, 1.5), center[2]],
        u: [tilt.sin() * ang.cos(), tilt.sin() * ang.sin(), tilt.cos()],
        radius: spec.cyl_radius_mm * 0.9,
    };

    let voxel_mm = spec.spacing.0.min(spec.spacing.1).min(spec.spacing.2) as f64;
    // normalized-radius ramp width equivalent to ~1 voxel
    let w_r = voxel_mm / axes.iter().cloned().fold(f64::INFINITY, f64::min);
    let r_wm = 0.62;
    let r_gm = 0.85;

    let mut t1 = Volume3D::zeros(spec.dims, spec.spacing, IDENTITY_AFFINE);
    let mut s0 = t1.clone();
    let mut tensors = TensorField::zeros(spec.dims);
    let mut brain = Mask3D::zeros_like(&t1);
    let mut m_csf = Mask3D::zeros_like(&t1);
    let mut m_gm = Mask3D::zeros_like(&t1);
    let mut m_wm = Mask3D::zeros_like(&t1);
    let mut m_c1 = Mask3D::zeros_like(&t1);
    let mut m_c2 = Mask3D::zeros_like(&t1);

    // anisotropic tensor for a cylinder axis u:
    // D = radial*I + (axial - radial) * u u'
    let aniso = |u: &[f64; 3]| {
        let d = spec.cyl_axial_diff - spec.cyl_radial_diff;
        [
            spec.cyl_radial_diff + d * u[0] * u[0], // xx
            spec.cyl_radial_diff + d * u[1] * u[1], // yy
            spec.cyl_radial_diff + d * u[2] * u[2], // zz
            d * u[0] * u[1],                        // xy
            d * u[0] * u[2],                        // xz
            d * u[1] * u[2],                        // yz
        ]
    };
    let d_c1 = aniso(&cyl1.u);
    let d_c2 = aniso(&cyl2.u);

    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                let p = [
                    i as f64 * spec.spacing.0 as f64,
                    j as f64 * spec.spacing.1 as f64,
                    k as f64 * spec.spacing.2 as f64,
                ];
                let r = (((p[0] - center[0]) / axes[0]).powi(2)
                    + ((p[1] - center[1]) / axes[1]).powi(2)
                    + ((p[2] - center[2]) / axes[2]).powi(2))
                .sqrt();
                let t_wm = ramp(r, r_wm, w_r);
                let t_gm = ramp(r, r_gm, w_r);
                let t_bg = ramp(r, 1.0, w_r);
                let w_wm = 1.0 - t_wm;
                let w_gm = t_wm - t_gm;
                let w_csf = t_gm - t_bg;
                let inside = 1.0 - t_bg;
                if inside <= 0.0 {
                    continue;
                }
                let idx = [i, j, k];
                // cylinder memberships, confined to the brain; the residual
                // tissue weight keeps wc1 + wc2 + w_tissue = inside so the
                // field ramps to 0 at the brain surface
                let wc1 = (1.0 - ramp(cyl1.dist(p), cyl1.radius, voxel_mm)) * inside;
                let wc2 = ((1.0 - ramp(cyl2.dist(p), cyl2.radius, voxel_mm)) * inside)
                    .min(inside - wc1);
                let w_tissue = (inside - wc1 - wc2).max(0.0);
                // normalized shell blend (w_wm + w_gm + w_csf = inside)
                let t1_shell = (w_wm * T1_WM + w_gm * T1_GM + w_csf * T1_CSF) / inside;
                let s0_shell = (w_wm * S0_WM + w_gm * S0_GM + w_csf * S0_CSF) / inside;
                let iso_md =
                    (w_wm * spec.wm_md + w_gm * spec.gm_md + w_csf * spec.csf_md) / inside;

                // fiber cylinders are white-matter-like in T1: they carry no
                // T1 contrast of their own and are only visible in diffusion
                t1.data[idx] = ((wc1 + wc2) * T1_WM + w_tissue * t1_shell) as f32;
                s0.data[idx] = ((wc1 + wc2) * S0_CYL + w_tissue * s0_shell) as f32;
                tensors.dxx[idx] = wc1 * d_c1[0] + wc2 * d_c2[0] + w_tissue * iso_md;
                tensors.dyy[idx] = wc1 * d_c1[1] + wc2 * d_c2[1] + w_tissue * iso_md;
                tensors.dzz[idx] = wc1 * d_c1[2] + wc2 * d_c2[2] + w_tissue * iso_md;
                tensors.dxy[idx] = wc1 * d_c1[3] + wc2 * d_c2[3];
                tensors.dxz[idx] = wc1 * d_c1[4] + wc2 * d_c2[4];
                tensors.dyz[idx] = wc1 * d_c1[5] + wc2 * d_c2[5];

                brain.data[idx] = u8::from(inside >= 0.5);
                if inside >= 0.5 {
                    m_c1.data[idx] = u8::from(wc1 >= 0.5);
                    m_c2.data[idx] = u8::from(wc2 >= 0.5);
                    if wc1 < 0.5 && wc2 < 0.5 {
                        m_wm.data[idx] = u8::from(w_wm >= 0.5);
                        m_gm.data[idx] = u8::from(w_gm >= 0.5);
                        m_csf.data[idx] = u8::from(w_csf >= 0.5);
                    }
                }
            }
        }
    }

    let mut structure_masks = BTreeMap::new();
    structure_masks.insert("brain".to_string(), brain);
    structure_masks.insert("csf".to_string(), m_csf);
    structure_masks.insert("gm".to_string(), m_gm);
    structure_masks.insert("wm".to_string(), m_wm);
    structure_masks.insert("cylinder1".to_string(), m_c1);
    structure_masks.insert("cylinder2".to_string(), m_c2);
    Ok(Phantom { t1, tensors, s0, structure_masks })
}

/// Approximately even unit directions on the sphere (golden-section spiral).
pub fn gradient_directions(n: usize) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

/// Gradient table with one b0 followed by `n_directions` shells at `bval`.
pub fn default_gradient_table(n_directions: usize, bval: f64) -> GradientTable {
    let mut bvals = vec![0.0];
    let mut bvecs = vec![[0.0, 0.0, 0.0]];
    for g in gradient_directions(n_directions) {
        bvals.push(bval);
        bvecs.push(g);
    }
    GradientTable::new(bvals, bvecs, 50.0).expect("spiral directions are unit length")
}

/// Standard normal via Box-Muller.
fn gauss<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Simulate the DWI study: per volume v, S = S0 * exp(-b_v * g' D g), with
/// Rician-style noise (magnitude of complex Gaussian) of scale `sigma`.
pub fn simulate_dwi(
    tensors: &TensorField,
    s0: &Volume3D,
    gradient: &GradientTable,
    sigma: f64,
    seed: u64,
) -> Result<Volume4D> {
    if sigma < 0.0 {
        return Err(FovxError::Validation("noise sigma must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = s0.dims;
    let mut volumes = Vec::with_capacity(gradient.len());
    for v in 0..gradient.len() {
        let b = gradient.bvals[v];
        let g = gradient.bvecs[v];
        let mut vol = Volume3D::zeros(dims, s0.spacing, s0.affine);
        for i in 0..dims.0 {
            for j in 0..dims.1 {
                for k in 0..dims.2 {
                    let base = s0.data[[i, j, k]] as f64;
                    if base == 0.0 && sigma == 0.0 {
                        continue;
                    }
                    let q = tensors.quad_form((i, j, k), &g);
                    let mut s = base * (-b * q).exp();
                    if sigma > 0.0 {
                        let n1 = gauss(&mut rng);
                        let n2 = gauss(&mut rng);
                        s = ((s + sigma * n1).powi(2) + (sigma * n2).powi(2)).sqrt();
                    }
                    vol.data[[i, j, k]] = s as f32;
                }
            }
        }
        volumes.push(vol);
    }
    Volume4D::new(volumes, gradient.clone())
}
