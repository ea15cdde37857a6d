//! Batch command-line orchestration: run configuration, dataset manifests,
//! and the five verbs (phantom | train | impute | evaluate | qa).
//!
//! Exit-code contract: 0 success, 2 configuration error, 3 data error,
//! 1 unexpected failure. Commands are deterministic given config + seed.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dwi::{
    classify_shell, read_affine_text, read_gradient_table, read_nifti, write_gradient_table,
    write_nifti_3d, write_nifti_4d, Affine4, ShellConfig, ShellId, Volume3D, Volume4D,
    IDENTITY_AFFINE,
};
use crate::error::{FovxError, Result};
use crate::fov::{
    compute_acquired_mask, estimate_cutoff_thickness, simulate_cutoff, CutSide, FovCut, Mask3D,
};
use crate::metrics::{
    adc_map, dice, per_distance_curve, psnr, split_region_dice, ssim3d_default, stats,
    AdcDirectionRow, BlandAltmanRow, DiceRow, DistanceRow, MetricsReport, PsnrSsimRow, StatsRow,
};
use crate::model::{
    impute_study, load_bundle, save_bundle, train, DiscriminatorConfig, GeneratorConfig,
    TrainConfig, TrainSample,
};
use crate::model::train::write_training_log;
use crate::phantom::{default_gradient_table, make_phantom, simulate_dwi, PhantomSpec};
use crate::preprocess::{normalize_intensity, normalize_t1, to_normalized_space};

// ---- configuration ---------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomRunConfig {
    pub count: usize,
    /// Fraction of subjects tagged `train`; the rest split between val and
    /// test (val first).
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// When > 0, an additional cut manifest with zero-filled DWIs and a
    /// truth-cut CSV are emitted alongside the complete dataset.
    pub cut_mm: f64,
    pub spec: PhantomSpec,
}

impl Default for PhantomRunConfig {
    fn default() -> Self {
        Self { count: 20, train_fraction: 0.8, val_fraction: 0.2, cut_mm: 0.0, spec: PhantomSpec::default() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub manifest: Option<PathBuf>,
    pub bundle: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for subject-level parallelism; 0 = one per core.
    pub jobs: usize,
    /// Normalized-space grid (1 mm isotropic).
    pub grid_dims: (usize, usize, usize),
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
    pub phantom: PhantomRunConfig,
    pub shells: ShellConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: 1,
            grid_dims: (256, 256, 256),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            train: TrainConfig::default(),
            phantom: PhantomRunConfig::default(),
            shells: ShellConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

/// Flag overrides; flags win over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub manifest: Option<PathBuf>,
    pub bundle: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                toml::from_str(&text).map_err(|e| FovxError::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = overrides.seed {
            cfg.seed = s;
            cfg.train.seed = s;
        }
        if let Some(j) = overrides.jobs {
            cfg.jobs = j;
        }
        if overrides.manifest.is_some() {
            cfg.paths.manifest = overrides.manifest.clone();
        }
        if overrides.bundle.is_some() {
            cfg.paths.bundle = overrides.bundle.clone();
        }
        if overrides.out.is_some() {
            cfg.paths.out = overrides.out.clone();
        }
        if overrides.test_dir.is_some() {
            cfg.paths.test_dir = overrides.test_dir.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.train.validate()?;
        if self.phantom.count == 0 {
            return Err(FovxError::Config("phantom.count must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.phantom.train_fraction)
            || !(0.0..=1.0).contains(&self.phantom.val_fraction)
            || self.phantom.train_fraction + self.phantom.val_fraction > 1.0
        {
            return Err(FovxError::Config(
                "phantom train/val fractions must be in [0,1] and sum to <= 1".into(),
            ));
        }
        if self.phantom.cut_mm < 0.0 {
            return Err(FovxError::Config("phantom.cut_mm must be >= 0".into()));
        }
        if self.shells.b0_threshold < 0.0 || self.shells.shell_tolerance < 0.0 {
            return Err(FovxError::Config("shell thresholds must be >= 0".into()));
        }
        let (x, y, z) = self.grid_dims;
        if x == 0 || y == 0 || z == 0 || x % 4 != 0 || y % 4 != 0 || z % 4 != 0 {
            return Err(FovxError::Config("grid_dims must be positive multiples of 4".into()));
        }
        Ok(())
    }

    fn require<'a>(&'a self, field: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
        field
            .as_deref()
            .ok_or_else(|| FovxError::Config(format!("missing required path: {what}")))
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| FovxError::Config(e.to_string()))
    }
}

// ---- manifest ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRow {
    pub subject: String,
    pub dwi: String,
    pub bvals: String,
    pub bvecs: String,
    pub t1: String,
    /// Path to a 4x4 text affine, or the literal "identity".
    pub affine: String,
    /// Empty string when absent.
    pub brain_mask: String,
    /// Semicolon-separated `name=path` pairs; empty when absent.
    pub structure_masks: String,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub rows: Vec<ManifestRow>,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestRow> {
        self.rows.iter().filter(|r| r.split == split).collect()
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows: Vec<ManifestRow> = Vec::new();
    for rec in reader.deserialize() {
        rows.push(rec.map_err(|e| FovxError::Data(format!("manifest: {e}")))?);
    }
    let manifest = DatasetManifest { rows, base_dir };
    let mut seen = BTreeSet::new();
    for row in &manifest.rows {
        if !seen.insert(row.subject.clone()) {
            return Err(FovxError::Data(format!("duplicate subject id {}", row.subject)));
        }
        let mut required = vec![&row.dwi, &row.bvals, &row.bvecs, &row.t1];
        if !row.brain_mask.is_empty() {
            required.push(&row.brain_mask);
        }
        for rel in required {
            let p = manifest.resolve(rel);
            if !p.exists() {
                return Err(FovxError::Data(format!(
                    "{}: referenced file does not exist: {}",
                    row.subject,
                    p.display()
                )));
            }
        }
        if row.affine != "identity" && !manifest.resolve(&row.affine).exists() {
            return Err(FovxError::Data(format!(
                "{}: affine file does not exist: {}",
                row.subject, row.affine
            )));
        }
        for (_, p) in parse_structure_masks(&row.structure_masks)? {
            if !manifest.resolve(&p).exists() {
                return Err(FovxError::Data(format!(
                    "{}: structure mask does not exist: {p}",
                    row.subject
                )));
            }
        }
    }
    Ok(manifest)
}

pub fn write_manifest(rows: &[ManifestRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record([
            "subject",
            "dwi",
            "bvals",
            "bvecs",
            "t1",
            "affine",
            "brain_mask",
            "structure_masks",
            "split",
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn parse_structure_masks(field: &str) -> Result<Vec<(String, String)>> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(';')
        .map(|pair| {
            pair.split_once('=')
                .map(|(n, p)| (n.to_string(), p.to_string()))
                .ok_or_else(|| {
                    FovxError::Data(format!("malformed structure_masks entry: {pair}"))
                })
        })
        .collect()
}

/// A manifest row fully loaded into memory.
pub struct SubjectData {
    pub subject: String,
    pub study: Volume4D,
    pub t1: Volume3D,
    pub reg_affine: Affine4,
    pub brain_mask: Option<Mask3D>,
    pub structures: Vec<(String, Mask3D)>,
}

pub fn load_subject(manifest: &DatasetManifest, row: &ManifestRow, shells: &ShellConfig) -> Result<SubjectData> {
    let study = read_nifti(manifest.resolve(&row.dwi))?.into_4d()?;
    let gradient = read_gradient_table(
        manifest.resolve(&row.bvals),
        manifest.resolve(&row.bvecs),
        shells.b0_threshold,
    )?;
    let study = study.with_gradient(gradient)?;
    let t1 = read_nifti(manifest.resolve(&row.t1))?.into_3d()?;
    let reg_affine = if row.affine == "identity" {
        IDENTITY_AFFINE
    } else {
        read_affine_text(manifest.resolve(&row.affine))?
    };
    let brain_mask = if row.brain_mask.is_empty() {
        None
    } else {
        Some(Mask3D::from_volume(
            &read_nifti(manifest.resolve(&row.brain_mask))?.into_3d()?,
        )?)
    };
    let mut structures = Vec::new();
    for (name, rel) in parse_structure_masks(&row.structure_masks)? {
        structures.push((
            name,
            Mask3D::from_volume(&read_nifti(manifest.resolve(&rel))?.into_3d()?)?,
        ));
    }
    Ok(SubjectData {
        subject: row.subject.clone(),
        study,
        t1,
        reg_affine,
        brain_mask,
        structures,
    })
}

// ---- phantom ---------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
struct TruthCutRow {
    subject: String,
    cut_mm: f64,
    side: String,
}

/// Write `count` phantom datasets plus a manifest (and, with `cut_mm > 0`,
/// a companion cut manifest and truth CSV). Deterministic per seed.
pub fn cmd_phantom(cfg: &RunConfig) -> Result<()> {
    let out = cfg.require(&cfg.paths.out, "out")?;
    std::fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    let mut cut_rows = Vec::new();
    let mut truth_cuts = Vec::new();
    let n_train = (cfg.phantom.count as f64 * cfg.phantom.train_fraction).round() as usize;
    let n_val = (cfg.phantom.count as f64 * cfg.phantom.val_fraction).round() as usize;
    for i in 0..cfg.phantom.count {
        let subject = format!("p{i:03}");
        let mut spec = cfg.phantom.spec.clone();
        spec.seed = cfg.seed.wrapping_add(i as u64);
        let phantom = make_phantom(&spec)?;
        let table = default_gradient_table(spec.n_directions, spec.bval);
        let study = simulate_dwi(&phantom.tensors, &phantom.s0, &table, spec.noise_sigma, spec.seed)?;
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        write_nifti_4d(&study, out.join(format!("{subject}_dwi.nii.gz")))?;
        write_gradient_table(
            &study.gradient,
            out.join(format!("{subject}.bval")),
            out.join(format!("{subject}.bvec")),
        )?;
        write_nifti_3d(&phantom.t1, out.join(format!("{subject}_t1.nii.gz")))?;
        write_nifti_3d(
            &phantom.structure_masks["brain"].to_volume(),
            out.join(format!("{subject}_brain.nii.gz")),
        )?;
        let mut mask_field = Vec::new();
        for (name, mask) in &phantom.structure_masks {
            if name == "brain" {
                continue;
            }
            let file = format!("{subject}_{name}.nii.gz");
            write_nifti_3d(&mask.to_volume(), out.join(&file))?;
            mask_field.push(format!("{name}={file}"));
        }
        let row = ManifestRow {
            subject: subject.clone(),
            dwi: format!("{subject}_dwi.nii.gz"),
            bvals: format!("{subject}.bval"),
            bvecs: format!("{subject}.bvec"),
            t1: format!("{subject}_t1.nii.gz"),
            affine: "identity".into(),
            brain_mask: format!("{subject}_brain.nii.gz"),
            structure_masks: mask_field.join(";"),
            split,
        };
        if cfg.phantom.cut_mm > 0.0 {
            let side = if i % 2 == 0 { CutSide::Bottom } else { CutSide::Top };
            let (cut_study, cut, _) = simulate_cutoff(&study, cfg.phantom.cut_mm, side)?;
            let cut_file = format!("{subject}_dwi_cut.nii.gz");
            write_nifti_4d(&cut_study, out.join(&cut_file))?;
            cut_rows.push(ManifestRow { dwi: cut_file, ..row.clone() });
            truth_cuts.push(TruthCutRow {
                subject: subject.clone(),
                cut_mm: cut.n_slices() as f64 * study.grid().spacing.2 as f64,
                side: cut.side.name().into(),
            });
        }
        rows.push(row);
    }
    write_manifest(&rows, &out.join("manifest.csv"))?;
    if cfg.phantom.cut_mm > 0.0 {
        write_manifest(&cut_rows, &out.join("manifest_cut.csv"))?;
        let mut w = csv::Writer::from_path(out.join("truth_cuts.csv"))?;
        for r in &truth_cuts {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(())
}

// ---- train -------------------------------------------------------------------

fn prepare_samples(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    rows: &[&ManifestRow],
) -> Result<Vec<TrainSample>> {
    rows.iter()
        .map(|row| {
            let s = load_subject(manifest, row, &cfg.shells)?;
            let (norm_study, _) = normalize_intensity(&s.study)?;
            let (norm_t1, _) = normalize_t1(&s.t1)?;
            let (study_n, t1_n, _) =
                to_normalized_space(&norm_study, &norm_t1, &s.reg_affine, cfg.grid_dims)?;
            Ok(TrainSample { subject: s.subject, study: study_n, t1: t1_n })
        })
        .collect()
}

/// Train the four generators on the manifest's train/val splits; writes the
/// bundle directory plus `training_log.csv` inside it.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let manifest = load_manifest(cfg.require(&cfg.paths.manifest, "manifest")?)?;
    let bundle_dir = cfg.require(&cfg.paths.bundle, "bundle")?;
    let train_rows = manifest.split(Split::Train);
    let val_rows = manifest.split(Split::Val);
    if train_rows.is_empty() {
        return Err(FovxError::Config("manifest has no train split".into()));
    }
    if val_rows.is_empty() {
        return Err(FovxError::Config("manifest has no val split".into()));
    }
    let train_set = prepare_samples(cfg, &manifest, &train_rows)?;
    let val_set = prepare_samples(cfg, &manifest, &val_rows)?;
    let (bundle, log) = train(&train_set, &val_set, &cfg.generator, &cfg.discriminator, &cfg.train)?;
    save_bundle(&bundle, bundle_dir)?;
    write_training_log(&bundle_dir.join("training_log.csv"), &log)?;
    Ok(())
}

// ---- impute ------------------------------------------------------------------

/// Impute every manifest subject; outputs `<subject>_fovx.nii.gz` (plus the
/// gradient files and the detected acquired mask) in the output directory.
pub fn cmd_impute(cfg: &RunConfig) -> Result<()> {
    let manifest = load_manifest(cfg.require(&cfg.paths.manifest, "manifest")?)?;
    let bundle = load_bundle(cfg.require(&cfg.paths.bundle, "bundle")?)?;
    let out = cfg.require(&cfg.paths.out, "out")?;
    std::fs::create_dir_all(out)?;
    let pool = cfg.pool()?;
    pool.install(|| {
        manifest
            .rows
            .par_iter()
            .map(|row| {
                let s = load_subject(&manifest, row, &cfg.shells)?;
                let imputed = impute_study(&s.study, &s.t1, &s.reg_affine, &bundle)?;
                write_nifti_4d(&imputed, out.join(format!("{}_fovx.nii.gz", s.subject)))?;
                write_gradient_table(
                    &imputed.gradient,
                    out.join(format!("{}_fovx.bval", s.subject)),
                    out.join(format!("{}_fovx.bvec", s.subject)),
                )?;
                let acquired = compute_acquired_mask(&s.study);
                write_nifti_3d(
                    &acquired.to_volume(),
                    out.join(format!("{}_acquired.nii.gz", s.subject)),
                )?;
                Ok(())
            })
            .collect::<Result<Vec<()>>>()
    })?;
    Ok(())
}

// ---- evaluate ----------------------------------------------------------------

/// Reconstruct the cut descriptor from a slice-constant acquired mask.
pub fn cut_from_mask(acquired: &Mask3D) -> FovCut {
    let nz = acquired.dims.2;
    let dz = acquired.spacing.2 as f64;
    let missing: Vec<bool> = (0..nz)
        .map(|k| {
            acquired
                .data
                .index_axis(ndarray::Axis(2), k)
                .iter()
                .all(|&m| m == 0)
        })
        .collect();
    let bottom = missing.iter().take_while(|&&m| m).count();
    let top = missing.iter().rev().take_while(|&&m| m).count();
    if bottom == 0 && top == 0 {
        FovCut::none()
    } else if bottom >= top {
        FovCut { side: CutSide::Bottom, extent_mm: bottom as f64 * dz, slice_range: (0, bottom) }
    } else {
        FovCut { side: CutSide::Top, extent_mm: top as f64 * dz, slice_range: (nz - top, nz) }
    }
}

fn brain_region(s: &SubjectData) -> Mask3D {
    s.brain_mask.clone().unwrap_or_else(|| {
        // fall back to a threshold mask of the mean b0
        let grid = s.study.grid();
        let mut mean = Volume3D::zeros(grid.dims, grid.spacing, grid.affine);
        let mut count = 0usize;
        for (i, &b) in s.study.gradient.bvals.iter().enumerate() {
            if b <= 50.0 {
                mean.data += &s.study.volumes[i].data;
                count += 1;
            }
        }
        if count == 0 {
            for v in &s.study.volumes {
                mean.data += &v.data;
            }
            count = s.study.len();
        }
        mean.data.mapv_inplace(|x| x / count as f32);
        let peak = mean.data.iter().cloned().fold(0.0f32, f32::max);
        Mask3D::from_volume_threshold(&mean, 0.1 * peak)
    })
}

struct SubjectEval {
    psnr_ssim: Vec<PsnrSsimRow>,
    distance: Vec<DistanceRow>,
    adc: Vec<AdcDirectionRow>,
    dice_rows: Vec<DiceRow>,
    brain_volume_ref: f64,
    brain_volume_test: f64,
    mean_dice_cut: f64,
    mean_dice_imputed: f64,
}

fn evaluate_subject(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    row: &ManifestRow,
    test_dir: &Path,
) -> Result<SubjectEval> {
    let s = load_subject(manifest, row, &cfg.shells)?;
    let test_path = test_dir.join(format!("{}_fovx.nii.gz", row.subject));
    if !test_path.exists() {
        return Err(FovxError::Data(format!(
            "no paired test image for subject {}: {}",
            row.subject,
            test_path.display()
        )));
    }
    let test = read_nifti(&test_path)?.into_4d()?;
    if test.len() != s.study.len() {
        return Err(FovxError::Data(format!(
            "{}: test study has {} volumes, reference has {}",
            row.subject,
            test.len(),
            s.study.len()
        )));
    }
    let acquired_path = test_dir.join(format!("{}_acquired.nii.gz", row.subject));
    let acquired = if acquired_path.exists() {
        Mask3D::from_volume(&read_nifti(&acquired_path)?.into_3d()?)?
    } else {
        Mask3D::ones_like(s.study.grid())
    };
    let brain = brain_region(&s);
    let cut = cut_from_mask(&acquired);

    // per-shell PSNR/SSIM over the brain, averaged across volumes
    let mut psnr_ssim = Vec::new();
    for shell in [ShellId::B0, ShellId::B1300] {
        let mut ps = Vec::new();
        let mut ss = Vec::new();
        for (v, &b) in s.study.gradient.bvals.iter().enumerate() {
            if classify_shell(b, &cfg.shells)? != shell {
                continue;
            }
            ps.push(psnr(&s.study.volumes[v], &test.volumes[v], &brain)?);
            ss.push(ssim3d_default(&s.study.volumes[v], &test.volumes[v], &brain)?);
        }
        if !ps.is_empty() {
            psnr_ssim.push(PsnrSsimRow {
                subject: row.subject.clone(),
                shell: shell.name().into(),
                psnr: ps.iter().sum::<f64>() / ps.len() as f64,
                ssim: ss.iter().sum::<f64>() / ss.len() as f64,
            });
        }
    }

    // distance curves (only meaningful when a cut was detected)
    let mut distance = Vec::new();
    if cut.n_slices() > 0 {
        for shell in [ShellId::B0, ShellId::B1300] {
            for (v, &b) in s.study.gradient.bvals.iter().enumerate() {
                if classify_shell(b, &cfg.shells)? != shell {
                    continue;
                }
                for (d, p, ssim) in
                    per_distance_curve(&s.study.volumes[v], &test.volumes[v], &cut, &brain)?
                {
                    distance.push(DistanceRow {
                        subject: row.subject.clone(),
                        shell: shell.name().into(),
                        distance_mm: d,
                        psnr: p,
                        ssim,
                    });
                }
                break; // one representative volume per shell keeps rows bounded
            }
        }
    }

    // per-direction ADC PSNR inside brain ∩ imputed region
    let mut adc = Vec::new();
    let mut imputed_region = brain.clone();
    for (m, &a) in imputed_region.data.iter_mut().zip(acquired.data.iter()) {
        if a == 1 {
            *m = 0;
        }
    }
    let has_b0 = s.study.gradient.bvals.iter().any(|&b| b <= cfg.shells.b0_threshold);
    if has_b0 && imputed_region.count() > 0 {
        for (v, &b) in s.study.gradient.bvals.iter().enumerate() {
            if b <= cfg.shells.b0_threshold {
                continue;
            }
            let ref_adc = adc_map(&s.study, v)?;
            let test_adc = adc_map(&test, v)?;
            adc.push(AdcDirectionRow {
                subject: row.subject.clone(),
                direction_index: v,
                psnr: adc_psnr(&ref_adc, &test_adc, &imputed_region)?,
            });
        }
    }

    // Dice of threshold brain masks, cut study and imputed study vs reference
    let cut_study = if cut.n_slices() > 0 {
        simulate_cutoff(&s.study, cut.extent_mm, cut.side)?.0
    } else {
        s.study.clone()
    };
    let ref_mask = &brain;
    let cut_mask = threshold_brain(&cut_study);
    let test_mask = threshold_brain(&test);
    let (cda, cdi) = split_region_dice(ref_mask, &cut_mask, &acquired)?;
    let (ida, idi) = split_region_dice(ref_mask, &test_mask, &acquired)?;
    let dice_rows = vec![DiceRow {
        subject: row.subject.clone(),
        structure: "brain".into(),
        cut_dice_acquired: cda,
        cut_dice_imputed: cdi,
        imputed_dice_acquired: ida,
        imputed_dice_imputed: idi,
    }];

    let voxel_mm3 = (s.study.grid().spacing.0 as f64)
        * (s.study.grid().spacing.1 as f64)
        * (s.study.grid().spacing.2 as f64);
    Ok(SubjectEval {
        psnr_ssim,
        distance,
        adc,
        dice_rows,
        brain_volume_ref: ref_mask.count() as f64 * voxel_mm3,
        brain_volume_test: test_mask.count() as f64 * voxel_mm3,
        mean_dice_cut: dice(ref_mask, &cut_mask)?,
        mean_dice_imputed: dice(ref_mask, &test_mask)?,
    })
}

fn threshold_brain(study: &Volume4D) -> Mask3D {
    let grid = study.grid();
    let mut mean = Volume3D::zeros(grid.dims, grid.spacing, grid.affine);
    for v in &study.volumes {
        mean.data += &v.data;
    }
    mean.data.mapv_inplace(|x| x / study.len() as f32);
    let peak = mean.data.iter().cloned().fold(0.0f32, f32::max);
    Mask3D::from_volume_threshold(&mean, 0.1 * peak)
}

/// PSNR with the data range normalized by the reference ADC peak (ADC maps
/// are not in [0,1]).
fn adc_psnr(reference: &Volume3D, test: &Volume3D, region: &Mask3D) -> Result<f64> {
    let peak = reference
        .data
        .iter()
        .zip(region.data.iter())
        .filter(|(_, &m)| m == 1)
        .map(|(&x, _)| x.abs() as f64)
        .fold(0.0f64, f64::max);
    if peak == 0.0 {
        return psnr(reference, test, region);
    }
    let scale = |v: &Volume3D| {
        let mut out = v.clone();
        out.data.mapv_inplace(|x| x / peak as f32);
        out
    };
    psnr(&scale(reference), &scale(test), region)
}

/// Compare imputed outputs in `test_dir` against the reference manifest and
/// emit the full CSV report into the output directory.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    let manifest = load_manifest(cfg.require(&cfg.paths.manifest, "manifest")?)?;
    let test_dir = cfg.require(&cfg.paths.test_dir, "test_dir")?;
    let out = cfg.require(&cfg.paths.out, "out")?;
    std::fs::create_dir_all(out)?;
    let pool = cfg.pool()?;
    let evals: Vec<SubjectEval> = pool.install(|| {
        manifest
            .rows
            .par_iter()
            .filter(|row| test_dir.join(format!("{}_fovx.nii.gz", row.subject)).exists())
            .map(|row| evaluate_subject(cfg, &manifest, row, test_dir))
            .collect::<Result<Vec<_>>>()
    })?;
    if evals.is_empty() {
        return Err(FovxError::Data("no manifest subject has a paired test image".into()));
    }

    let mut report = MetricsReport::default();
    for e in &evals {
        report.psnr_ssim.extend(e.psnr_ssim.clone());
        report.distance_curve.extend(e.distance.clone());
        report.adc_directions.extend(e.adc.clone());
        report.dice.extend(e.dice_rows.clone());
    }

    // aggregate statistics mirroring the headline claims
    let finite_dist: Vec<(f64, f64)> = report
        .distance_curve
        .iter()
        .filter(|r| r.psnr.is_finite())
        .map(|r| (r.distance_mm, r.psnr))
        .collect();
    if finite_dist.len() >= 3 {
        let (xs, ys): (Vec<f64>, Vec<f64>) = finite_dist.into_iter().unzip();
        let (rho, p) = stats::spearman(&xs, &ys)?;
        report.stats.push(StatsRow {
            test: "spearman_psnr_vs_distance".into(),
            statistic: rho,
            p_value: p,
        });
    }
    let mut by_direction: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    for r in &report.adc_directions {
        if r.psnr.is_finite() {
            by_direction.entry(r.direction_index).or_default().push(r.psnr);
        }
    }
    let groups: Vec<Vec<f64>> = by_direction.into_values().filter(|g| !g.is_empty()).collect();
    if groups.len() >= 2 && groups.iter().all(|g| g.len() >= 2) {
        let (h, p) = stats::kruskal_wallis(&groups)?;
        report.stats.push(StatsRow {
            test: "kruskal_wallis_adc_psnr_by_direction".into(),
            statistic: h,
            p_value: p,
        });
    }
    let cut_d: Vec<f64> = evals.iter().map(|e| e.mean_dice_cut).collect();
    let imp_d: Vec<f64> = evals.iter().map(|e| e.mean_dice_imputed).collect();
    if cut_d.len() >= 2 {
        let (t, p) = stats::paired_t_test(&imp_d, &cut_d)?;
        report.stats.push(StatsRow {
            test: "paired_t_dice_imputed_vs_cut".into(),
            statistic: t,
            p_value: p,
        });
        let refs: Vec<f64> = evals.iter().map(|e| e.brain_volume_ref).collect();
        let tests: Vec<f64> = evals.iter().map(|e| e.brain_volume_test).collect();
        let (mean, sd, lo, hi) = stats::bland_altman(&refs, &tests)?;
        report.bland_altman.push(BlandAltmanRow {
            label: "brain_volume_mm3".into(),
            mean_diff: mean,
            sd_diff: sd,
            loa_low: lo,
            loa_high: hi,
        });
    }
    report.write_csvs(out)?;
    Ok(())
}

// ---- qa ------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct QaRow {
    pub subject: String,
    pub cutoff_mm: f64,
    pub side: String,
}

/// Estimate the missing-slab thickness of every manifest subject against
/// its brain mask (or a T1 threshold mask); writes qa.csv.
pub fn cmd_qa(cfg: &RunConfig) -> Result<()> {
    let manifest = load_manifest(cfg.require(&cfg.paths.manifest, "manifest")?)?;
    let out = cfg.require(&cfg.paths.out, "out")?;
    std::fs::create_dir_all(out)?;
    let pool = cfg.pool()?;
    let rows: Vec<QaRow> = pool.install(|| {
        manifest
            .rows
            .par_iter()
            .map(|row| {
                let s = load_subject(&manifest, row, &cfg.shells)?;
                let brain = s.brain_mask.clone().unwrap_or_else(|| {
                    let peak = s.t1.data.iter().cloned().fold(0.0f32, f32::max);
                    Mask3D::from_volume_threshold(&s.t1, 0.1 * peak)
                });
                let acquired = compute_acquired_mask(&s.study);
                let (mm, side) = estimate_cutoff_thickness(&acquired, &brain)?;
                Ok(QaRow { subject: row.subject.clone(), cutoff_mm: mm, side: side.name().into() })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut w = csv::Writer::from_path(out.join("qa.csv"))?;
    if rows.is_empty() {
        w.write_record(["subject", "cutoff_mm", "side"])?;
    }
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
