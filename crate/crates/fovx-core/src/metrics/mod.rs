//! Volumetric evaluation metrics: region-restricted PSNR, 3D windowed SSIM,
//! Dice overlap, ADC maps, and distance-resolved quality curves.
//!
//! PSNR uses MAX = 1.0 (normalized intensity range). SSIM uses a uniform
//! (box) window, 7 voxels per dimension by default, clipped at volume
//! boundaries, averaged over window centers inside the evaluation region.

pub mod stats;

use ndarray::Array3;
use serde::Serialize;

use crate::dwi::{Volume3D, Volume4D};
use crate::error::{FovxError, Result};
use crate::fov::{CutSide, FovCut, Mask3D};

fn check_grids(a: &Volume3D, b: &Volume3D) -> Result<()> {
    if a.dims != b.dims {
        return Err(FovxError::Geometry(format!(
            "volumes have different dims: {:?} vs {:?}",
            a.dims, b.dims
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio over the voxels where `region` is 1, with
/// MAX = 1.0. Identical inputs return +infinity (serialized as "inf").
pub fn psnr(reference: &Volume3D, test: &Volume3D, region: &Mask3D) -> Result<f64> {
    check_grids(reference, test)?;
    if reference.dims != region.dims {
        return Err(FovxError::Geometry("region mask grid mismatch".into()));
    }
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for ((&a, &b), &m) in reference
        .data
        .iter()
        .zip(test.data.iter())
        .zip(region.data.iter())
    {
        if m == 1 {
            let d = a as f64 - b as f64;
            sum += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(FovxError::Validation("empty evaluation region".into()));
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

/// Inclusive-prefix sum volume for O(1) box sums.
struct IntegralVolume {
    s: Array3<f64>,
}

impl IntegralVolume {
    fn build<F: Fn(usize, usize, usize) -> f64>(dims: (usize, usize, usize), f: F) -> Self {
        let (nx, ny, nz) = dims;
        let mut s = Array3::<f64>::zeros((nx + 1, ny + 1, nz + 1));
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    s[[i + 1, j + 1, k + 1]] = f(i, j, k)
                        + s[[i, j + 1, k + 1]]
                        + s[[i + 1, j, k + 1]]
                        + s[[i + 1, j + 1, k]]
                        - s[[i, j, k + 1]]
                        - s[[i, j + 1, k]]
                        - s[[i + 1, j, k]]
                        + s[[i, j, k]];
                }
            }
        }
        Self { s }
    }

    /// Sum over the inclusive box [lo, hi].
    fn box_sum(&self, lo: (usize, usize, usize), hi: (usize, usize, usize)) -> f64 {
        let (x0, y0, z0) = lo;
        let (x1, y1, z1) = (hi.0 + 1, hi.1 + 1, hi.2 + 1);
        self.s[[x1, y1, z1]] - self.s[[x0, y1, z1]] - self.s[[x1, y0, z1]] - self.s[[x1, y1, z0]]
            + self.s[[x0, y0, z1]]
            + self.s[[x0, y1, z0]]
            + self.s[[x1, y0, z0]]
            - self.s[[x0, y0, z0]]
    }
}

/// 3D sliding-window SSIM with a uniform window of `window` voxels per
/// dimension (odd), dynamic range 1.0, averaged over window centers where
/// `region` is 1. Windows are clipped at volume boundaries.
pub fn ssim3d(
    reference: &Volume3D,
    test: &Volume3D,
    region: &Mask3D,
    window: usize,
    k1: f64,
    k2: f64,
) -> Result<f64> {
    check_grids(reference, test)?;
    if reference.dims != region.dims {
        return Err(FovxError::Geometry("region mask grid mismatch".into()));
    }
    if window % 2 == 0 || window == 0 {
        return Err(FovxError::Validation("SSIM window must be odd".into()));
    }
    let dims = reference.dims;
    let x = &reference.data;
    let y = &test.data;
    let sx = IntegralVolume::build(dims, |i, j, k| x[[i, j, k]] as f64);
    let sy = IntegralVolume::build(dims, |i, j, k| y[[i, j, k]] as f64);
    let sxx = IntegralVolume::build(dims, |i, j, k| (x[[i, j, k]] as f64).powi(2));
    let syy = IntegralVolume::build(dims, |i, j, k| (y[[i, j, k]] as f64).powi(2));
    let sxy = IntegralVolume::build(dims, |i, j, k| x[[i, j, k]] as f64 * y[[i, j, k]] as f64);
    let c1 = (k1 * 1.0).powi(2);
    let c2 = (k2 * 1.0).powi(2);
    let h = window / 2;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for ((i, j, k), &m) in region.data.indexed_iter() {
        if m != 1 {
            continue;
        }
        let lo = (i.saturating_sub(h), j.saturating_sub(h), k.saturating_sub(h));
        let hi = (
            (i + h).min(dims.0 - 1),
            (j + h).min(dims.1 - 1),
            (k + h).min(dims.2 - 1),
        );
        let n = ((hi.0 - lo.0 + 1) * (hi.1 - lo.1 + 1) * (hi.2 - lo.2 + 1)) as f64;
        let mx = sx.box_sum(lo, hi) / n;
        let my = sy.box_sum(lo, hi) / n;
        let vx = (sxx.box_sum(lo, hi) / n - mx * mx).max(0.0);
        let vy = (syy.box_sum(lo, hi) / n - my * my).max(0.0);
        // Cauchy-Schwarz bound keeps float noise from the prefix sums from
        // breaking SSIM(x, x) == 1 on constant windows
        let lim = (vx * vy).sqrt();
        let cxy = (sxy.box_sum(lo, hi) / n - mx * my).clamp(-lim, lim);
        let val = ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
            / ((mx * mx + my * my + c1) * (vx + vy + c2));
        total += val;
        count += 1;
    }
    if count == 0 {
        return Err(FovxError::Validation("empty SSIM evaluation region".into()));
    }
    Ok(total / count as f64)
}

pub const SSIM_DEFAULT_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

pub fn ssim3d_default(reference: &Volume3D, test: &Volume3D, region: &Mask3D) -> Result<f64> {
    ssim3d(reference, test, region, SSIM_DEFAULT_WINDOW, SSIM_K1, SSIM_K2)
}

/// Dice overlap 2|a n b| / (|a| + |b|); both empty counts as perfect
/// agreement (1.0).
pub fn dice(a: &Mask3D, b: &Mask3D) -> Result<f64> {
    if a.dims != b.dims {
        return Err(FovxError::Geometry("dice masks on different grids".into()));
    }
    let mut inter = 0usize;
    let mut na = 0usize;
    let mut nb = 0usize;
    for (&x, &y) in a.data.iter().zip(b.data.iter()) {
        na += (x == 1) as usize;
        nb += (y == 1) as usize;
        inter += (x == 1 && y == 1) as usize;
    }
    if na + nb == 0 {
        Ok(1.0)
    } else {
        Ok(2.0 * inter as f64 / (na + nb) as f64)
    }
}

/// Dice restricted to acquired (m = 1) and imputed (m = 0) voxels separately.
pub fn split_region_dice(
    ref_mask: &Mask3D,
    test_mask: &Mask3D,
    acquired: &Mask3D,
) -> Result<(f64, f64)> {
    if ref_mask.dims != test_mask.dims || ref_mask.dims != acquired.dims {
        return Err(FovxError::Geometry("split dice masks on different grids".into()));
    }
    let restrict = |want: u8| {
        let mut a = ref_mask.clone();
        let mut b = test_mask.clone();
        for ((x, y), &m) in a
            .data
            .iter_mut()
            .zip(b.data.iter_mut())
            .zip(acquired.data.iter())
        {
            if m != want {
                *x = 0;
                *y = 0;
            }
        }
        (a, b)
    };
    let (a1, b1) = restrict(1);
    let (a0, b0) = restrict(0);
    Ok((dice(&a1, &b1)?, dice(&a0, &b0)?))
}

/// Apparent diffusion coefficient along one gradient direction:
/// ADC = -ln(S / S0_mean) / b, with S and S0 floored at 1e-6 before the
/// ratio. Voxels with no baseline signal are 0.
pub fn adc_map(study: &Volume4D, direction_index: usize) -> Result<Volume3D> {
    if study.gradient.is_empty() {
        return Err(FovxError::Validation("study has no gradient table".into()));
    }
    let b0_idx: Vec<usize> = study
        .gradient
        .bvals
        .iter()
        .enumerate()
        .filter(|(_, &b)| b <= 50.0)
        .map(|(i, _)| i)
        .collect();
    if b0_idx.is_empty() {
        return Err(FovxError::Validation("study contains no b0 volume".into()));
    }
    if direction_index >= study.len() {
        return Err(FovxError::Validation(format!(
            "direction index {direction_index} out of range"
        )));
    }
    let b = study.gradient.bvals[direction_index];
    if b <= 0.0 {
        return Err(FovxError::Validation(
            "ADC requires a diffusion-weighted volume (b > 0)".into(),
        ));
    }
    let grid = study.grid();
    let mut s0 = Array3::<f64>::zeros(grid.dims);
    for &i in &b0_idx {
        for (o, &x) in s0.iter_mut().zip(study.volumes[i].data.iter()) {
            *o += x as f64;
        }
    }
    s0.mapv_inplace(|x| x / b0_idx.len() as f64);
    const EPS: f64 = 1e-6;
    let mut out = Volume3D::zeros(grid.dims, grid.spacing, grid.affine);
    let dwi = &study.volumes[direction_index].data;
    for ((o, &s), &base) in out.data.iter_mut().zip(dwi.iter()).zip(s0.iter()) {
        if base <= EPS {
            *o = 0.0;
        } else {
            let ratio = (s as f64).max(EPS) / base.max(EPS);
            *o = (-(ratio.ln()) / b) as f32;
        }
    }
    Ok(out)
}

/// One (distance_mm, psnr, ssim) entry per missing slice, distance measured
/// from the brain's outer extremity inward (larger distance = closer to the
/// acquired region). Slices where the region is empty carry NaN metrics.
pub fn per_distance_curve(
    reference: &Volume3D,
    test: &Volume3D,
    cut: &FovCut,
    region: &Mask3D,
) -> Result<Vec<(f64, f64, f64)>> {
    check_grids(reference, test)?;
    if cut.n_slices() == 0 {
        return Ok(Vec::new());
    }
    let nz = reference.dims.2;
    let dz = reference.spacing.2 as f64;
    let slice_nonempty = |k: usize| {
        region
            .data
            .index_axis(ndarray::Axis(2), k)
            .iter()
            .any(|&m| m == 1)
    };
    let brain_lo = (0..nz).find(|&k| slice_nonempty(k));
    let brain_hi = (0..nz).rev().find(|&k| slice_nonempty(k));
    let (brain_lo, brain_hi) = match (brain_lo, brain_hi) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(FovxError::Validation("empty evaluation region".into())),
    };
    let mut entries = Vec::new();
    for k in cut.slice_range.0..cut.slice_range.1 {
        let distance = match cut.side {
            CutSide::Top => (brain_hi as i64 - k as i64) as f64 * dz,
            CutSide::Bottom => (k as i64 - brain_lo as i64) as f64 * dz,
            CutSide::None => 0.0,
        };
        // restrict the region to this slice
        let mut slice_region = Mask3D::zeros_like(reference);
        slice_region
            .data
            .index_axis_mut(ndarray::Axis(2), k)
            .assign(&region.data.index_axis(ndarray::Axis(2), k));
        let (p, s) = if slice_region.count() == 0 {
            (f64::NAN, f64::NAN)
        } else {
            (
                psnr(reference, test, &slice_region)?,
                ssim3d_default(reference, test, &slice_region)?,
            )
        };
        entries.push((distance, p, s));
    }
    entries.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    Ok(entries)
}

// ---- report -------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct PsnrSsimRow {
    pub subject: String,
    pub shell: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DistanceRow {
    pub subject: String,
    pub shell: String,
    pub distance_mm: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AdcDirectionRow {
    pub subject: String,
    pub direction_index: usize,
    pub psnr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiceRow {
    pub subject: String,
    pub structure: String,
    pub cut_dice_acquired: f64,
    pub cut_dice_imputed: f64,
    pub imputed_dice_acquired: f64,
    pub imputed_dice_imputed: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BlandAltmanRow {
    pub label: String,
    pub mean_diff: f64,
    pub sd_diff: f64,
    pub loa_low: f64,
    pub loa_high: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StatsRow {
    pub test: String,
    pub statistic: f64,
    pub p_value: f64,
}

/// All evaluation results of one run; serializes to one CSV per table.
#[derive(Debug, Clone, Default)]
pub struct MetricsReport {
    pub psnr_ssim: Vec<PsnrSsimRow>,
    pub distance_curve: Vec<DistanceRow>,
    pub adc_directions: Vec<AdcDirectionRow>,
    pub dice: Vec<DiceRow>,
    pub bland_altman: Vec<BlandAltmanRow>,
    pub stats: Vec<StatsRow>,
}

fn write_csv<T: Serialize>(path: &std::path::Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

impl MetricsReport {
    /// Write psnr_ssim.csv, distance_curve.csv, adc_directions.csv,
    /// dice.csv, bland_altman.csv, and stats.csv into `dir`.
    pub fn write_csvs(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_csv(
            &dir.join("psnr_ssim.csv"),
            &self.psnr_ssim,
            &["subject", "shell", "psnr", "ssim"],
        )?;
        write_csv(
            &dir.join("distance_curve.csv"),
            &self.distance_curve,
            &["subject", "shell", "distance_mm", "psnr", "ssim"],
        )?;
        write_csv(
            &dir.join("adc_directions.csv"),
            &self.adc_directions,
            &["subject", "direction_index", "psnr"],
        )?;
        write_csv(
            &dir.join("dice.csv"),
            &self.dice,
            &[
                "subject",
                "structure",
                "cut_dice_acquired",
                "cut_dice_imputed",
                "imputed_dice_acquired",
                "imputed_dice_imputed",
            ],
        )?;
        write_csv(
            &dir.join("bland_altman.csv"),
            &self.bland_altman,
            &["label", "mean_diff", "sd_diff", "loa_low", "loa_high"],
        )?;
        write_csv(&dir.join("stats.csv"), &self.stats, &["test", "statistic", "p_value"])?;
        Ok(())
    }
}
