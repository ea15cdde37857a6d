//! Trained-model container (four generators + config + training-grid
//! snapshot), its on-disk format, and the end-to-end study imputation
//! pipeline.
//!
//! On disk a bundle is a directory: `manifest.json` describing the config
//! and every parameter tensor, plus one raw little-endian float32 blob per
//! tensor, named `<generator key>.<layer path>.bin`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::dwi::{classify_shell, Affine4, Plane, ShellConfig, Volume3D, Volume4D};
use crate::error::{FovxError, Result};
use crate::fov::compute_acquired_mask;
use crate::model::nn::{build_generator, GeneratorConfig, Net, Tensor};
use crate::model::train::{generator_key, DISPATCH_PLANES};
use crate::patch::{assemble_plane, composite_output, extract_slab, fuse_planes};
use crate::preprocess::{
    denormalize, from_normalized_space, normalize_intensity, normalize_t1, to_normalized_space,
    GridSpec,
};

/// Slices forwarded per network call during inference; bounds im2col memory.
const INFER_BATCH: usize = 8;

#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: GeneratorConfig,
    /// Normalized-space training grid snapshot (1 mm isotropic).
    pub grid_dims: (usize, usize, usize),
    pub grid_spacing: (f32, f32, f32),
    pub generators: BTreeMap<String, Net<f32>>,
}

impl ModelBundle {
    pub fn new(
        config: GeneratorConfig,
        grid_dims: (usize, usize, usize),
        grid_spacing: (f32, f32, f32),
        generators: BTreeMap<String, Net<f32>>,
    ) -> Result<Self> {
        config.validate()?;
        for shell in [crate::dwi::ShellId::B0, crate::dwi::ShellId::B1300] {
            for plane in DISPATCH_PLANES {
                let key = generator_key(shell, plane);
                let net = generators
                    .get(&key)
                    .ok_or_else(|| FovxError::Corruption(format!("missing generator {key}")))?;
                if net.in_channels != config.in_channels() {
                    return Err(FovxError::Corruption(format!(
                        "generator {key} expects {} channels but config implies {}",
                        net.in_channels,
                        config.in_channels()
                    )));
                }
            }
        }
        if generators.len() != 4 {
            return Err(FovxError::Corruption(format!(
                "bundle must hold exactly 4 generators, found {}",
                generators.len()
            )));
        }
        Ok(Self { config, grid_dims, grid_spacing, generators })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleManifest {
    config: GeneratorConfig,
    grid_dims: (usize, usize, usize),
    grid_spacing: (f32, f32, f32),
    tensors: Vec<TensorEntry>,
}

pub fn save_bundle(bundle: &ModelBundle, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    // visitation needs &mut; work on a clone so saving takes &bundle
    let mut gens = bundle.generators.clone();
    for (key, net) in gens.iter_mut() {
        let mut blobs: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
        net.visit_params(&mut |p| {
            blobs.push((format!("{key}.{}", p.name), p.shape.clone(), p.value.to_vec()));
        });
        for (name, shape, data) in blobs {
            let file = format!("{name}.bin");
            let mut f = std::fs::File::create(dir.join(&file))?;
            let mut bytes = Vec::with_capacity(data.len() * 4);
            for v in &data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            f.write_all(&bytes)?;
            entries.push(TensorEntry { name, shape, file });
        }
    }
    let manifest = BundleManifest {
        config: bundle.config.clone(),
        grid_dims: bundle.grid_dims,
        grid_spacing: bundle.grid_spacing,
        tensors: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| FovxError::Format(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<ModelBundle> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path)?;
    let manifest: BundleManifest =
        serde_json::from_str(&text).map_err(|e| FovxError::Corruption(format!("manifest: {e}")))?;
    manifest.config.validate()?;
    let mut by_name: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    for entry in &manifest.tensors {
        let path = dir.join(&entry.file);
        let mut bytes = Vec::new();
        std::fs::File::open(&path)
            .map_err(|_| FovxError::Corruption(format!("missing blob {}", entry.file)))?
            .read_to_end(&mut bytes)?;
        let expected: usize = entry.shape.iter().product();
        if bytes.len() != expected * 4 {
            return Err(FovxError::Corruption(format!(
                "blob {} holds {} bytes, manifest shape {:?} needs {}",
                entry.file,
                bytes.len(),
                entry.shape,
                expected * 4
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if by_name.insert(entry.name.clone(), (entry.shape.clone(), data)).is_some() {
            return Err(FovxError::Corruption(format!("duplicate tensor {}", entry.name)));
        }
    }
    let mut generators = BTreeMap::new();
    for shell in [crate::dwi::ShellId::B0, crate::dwi::ShellId::B1300] {
        for plane in DISPATCH_PLANES {
            let key = generator_key(shell, plane);
            let mut net: Net<f32> = build_generator(&manifest.config, 0)?;
            let mut problem: Option<FovxError> = None;
            net.visit_params(&mut |p| {
                if problem.is_some() {
                    return;
                }
                let full = format!("{key}.{}", p.name);
                match by_name.remove(&full) {
                    None => {
                        problem =
                            Some(FovxError::Corruption(format!("manifest lacks tensor {full}")));
                    }
                    Some((shape, data)) => {
                        if shape != p.shape || data.len() != p.value.len() {
                            problem = Some(FovxError::Corruption(format!(
                                "tensor {full}: blob shape {shape:?} does not match network shape {:?}",
                                p.shape
                            )));
                        } else {
                            p.value.copy_from_slice(&data);
                        }
                    }
                }
            });
            if let Some(e) = problem {
                return Err(e);
            }
            generators.insert(key, net);
        }
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(FovxError::Corruption(format!("unexpected tensor {extra}")));
    }
    ModelBundle::new(
        manifest.config,
        manifest.grid_dims,
        manifest.grid_spacing,
        generators,
    )
}

fn slab_tensor(channels: &ndarray::Array3<f32>) -> Tensor<f32> {
    let (c, h, w) = channels.dim();
    channels
        .clone()
        .into_shape_with_order((1, c, h, w))
        .expect("contiguous slab")
}

/// Predict every slice of `vol` along `plane` with `net` and reassemble.
pub fn predict_plane(
    net: &Net<f32>,
    vol: &Volume3D,
    t1: &Volume3D,
    plane: Plane,
    n: usize,
    grid: &GridSpec,
) -> Result<Volume3D> {
    let dim = match plane.axis() {
        0 => vol.dims.0,
        1 => vol.dims.1,
        _ => vol.dims.2,
    };
    let mut slices: Vec<Option<Array2<f32>>> = vec![None; dim];
    let mut idx = 0;
    while idx < dim {
        let hi = (idx + INFER_BATCH).min(dim);
        let slabs: Vec<Tensor<f32>> = (idx..hi)
            .map(|i| extract_slab(vol, t1, plane, i, n).map(|s| slab_tensor(&s.channels)))
            .collect::<Result<_>>()?;
        let batch = ndarray::concatenate(
            Axis(0),
            &slabs.iter().map(|t| t.view()).collect::<Vec<_>>(),
        )
        .expect("uniform slab shapes");
        let pred = net.forward(&batch)?;
        for (bi, i) in (idx..hi).enumerate() {
            slices[i] = Some(pred.index_axis(Axis(0), bi).index_axis(Axis(0), 0).to_owned());
        }
        idx = hi;
    }
    assemble_plane(&slices, plane, grid)
}

/// End-to-end imputation: normalize, resample to the bundle's grid, predict
/// sagittal + coronal, fuse, resample back, de-normalize, and composite so
/// acquired voxels pass through bit-identically. Works on complete-FOV
/// inputs too (output equals input).
pub fn impute_study(
    study: &Volume4D,
    t1: &Volume3D,
    reg_affine: &Affine4,
    bundle: &ModelBundle,
) -> Result<Volume4D> {
    if study.is_empty() {
        return Err(FovxError::Validation("empty study".into()));
    }
    let shells = ShellConfig::default();
    // fail fast on unsupported shells before any heavy work
    let shell_of: Vec<_> = study
        .gradient
        .bvals
        .iter()
        .map(|&b| classify_shell(b, &shells))
        .collect::<Result<_>>()?;

    let (norm_study, params) = normalize_intensity(study)?;
    let (norm_t1, _) = normalize_t1(t1)?;
    let (study_n, t1_n, grid_n) =
        to_normalized_space(&norm_study, &norm_t1, reg_affine, bundle.grid_dims)?;
    let acquired = compute_acquired_mask(study);
    let subject_grid = GridSpec::of_volume(study.grid());

    let mut out_volumes = Vec::with_capacity(study.len());
    for (v, shell) in shell_of.iter().enumerate() {
        let vol_n = &study_n.volumes[v];
        let sag = predict_plane(
            &bundle.generators[&generator_key(*shell, Plane::Sagittal)],
            vol_n,
            &t1_n,
            Plane::Sagittal,
            bundle.config.n,
            &grid_n,
        )?;
        let cor = predict_plane(
            &bundle.generators[&generator_key(*shell, Plane::Coronal)],
            vol_n,
            &t1_n,
            Plane::Coronal,
            bundle.config.n,
            &grid_n,
        )?;
        let fused = fuse_planes(&sag, &cor)?;
        let back = from_normalized_space(&fused, &subject_grid)?;
        let pred_subject = denormalize(&back, &params);
        out_volumes.push(composite_output(&study.volumes[v], &pred_subject, &acquired)?);
    }
    Volume4D::new(out_volumes, study.gradient.clone())
}
