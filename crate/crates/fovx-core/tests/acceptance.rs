//! End-to-end acceptance gates. Each test covers one release criterion and
//! prints a single `criterion NN ...: PASS/FAIL` line (visible with
//! `cargo test --test acceptance -- --nocapture`).
//!
//! Criteria 06-09 share one desk-scale trained bundle (built once, ~20 min
//! on a single core); the remaining criteria are fast oracle and round-trip
//! checks.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fovx_core::dwi::{
    read_nifti, write_nifti_4d, GradientTable, ShellId, Volume3D, Volume4D, IDENTITY_AFFINE,
};
use fovx_core::fov::{
    compute_acquired_mask, estimate_cutoff_thickness, simulate_cutoff, CutSide, FovCut, Mask3D,
};
use fovx_core::metrics::{
    adc_map, dice, per_distance_curve, psnr, ssim3d_default, stats, SSIM_DEFAULT_WINDOW, SSIM_K1,
    SSIM_K2,
};
use fovx_core::model::nn::{build_generator, make_constant_output, Net, Node};
use fovx_core::model::train::generator_objective_and_grads;
use fovx_core::model::{
    impute_study, load_bundle, save_bundle, DiscriminatorConfig, GeneratorConfig, ModelBundle,
    TrainConfig, TrainSample,
};
use fovx_core::patch::{assemble_plane, composite_output, extract_slab};
use fovx_core::phantom::{default_gradient_table, make_phantom, simulate_dwi, Phantom, PhantomSpec};
use fovx_core::preprocess::{normalize_intensity, normalize_t1, to_normalized_space, GridSpec};

fn report(id: u32, name: &str, ok: bool, detail: &str) {
    println!(
        "criterion {id:02} {name}: {} ({detail})",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {id:02} {name} failed: {detail}");
}

// ---- shared phantom helpers -------------------------------------------------

fn phantom_spec(seed: u64, n_directions: usize) -> PhantomSpec {
    PhantomSpec { seed, n_directions, noise_sigma: 0.0, ..PhantomSpec::default() }
}

fn phantom_study(spec: &PhantomSpec) -> (Phantom, Volume4D) {
    let p = make_phantom(spec).expect("phantom");
    let table = default_gradient_table(spec.n_directions, spec.bval);
    let study = simulate_dwi(&p.tensors, &p.s0, &table, spec.noise_sigma, spec.seed).expect("dwi");
    (p, study)
}

fn rand_volume(rng: &mut ChaCha8Rng, dims: (usize, usize, usize)) -> Volume3D {
    let mut v = Volume3D::zeros(dims, (1.0, 1.0, 1.0), IDENTITY_AFFINE);
    for x in v.data.iter_mut() {
        *x = rng.gen_range(0.0..1.0);
    }
    v
}

fn rand_mask(rng: &mut ChaCha8Rng, dims: (usize, usize, usize), p: f64) -> Mask3D {
    let v = Volume3D::zeros(dims, (1.0, 1.0, 1.0), IDENTITY_AFFINE);
    let mut m = Mask3D::zeros_like(&v);
    for x in m.data.iter_mut() {
        *x = u8::from(rng.gen_bool(p));
    }
    m
}

fn rand_dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.gen_range(4..=16), rng.gen_range(4..=16), rng.gen_range(4..=16))
}

// ---- criterion 01: metric oracles -------------------------------------------

fn psnr_oracle(a: &Volume3D, b: &Volume3D, m: &Mask3D) -> f64 {
    let mut sum = 0.0;
    let mut n = 0.0;
    for ((i, j, k), &mm) in m.data.indexed_iter() {
        if mm == 1 {
            let d = a.data[[i, j, k]] as f64 - b.data[[i, j, k]] as f64;
            sum += d * d;
            n += 1.0;
        }
    }
    10.0 * (n / sum).log10()
}

fn ssim_oracle(a: &Volume3D, b: &Volume3D, m: &Mask3D) -> f64 {
    let h = SSIM_DEFAULT_WINDOW / 2;
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let dims = a.dims;
    let mut total = 0.0;
    let mut count = 0usize;
    for ((i, j, k), &mm) in m.data.indexed_iter() {
        if mm != 1 {
            continue;
        }
        let (mut sx, mut sy, mut sxx, mut syy, mut sxy, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for ii in i.saturating_sub(h)..=(i + h).min(dims.0 - 1) {
            for jj in j.saturating_sub(h)..=(j + h).min(dims.1 - 1) {
                for kk in k.saturating_sub(h)..=(k + h).min(dims.2 - 1) {
                    let x = a.data[[ii, jj, kk]] as f64;
                    let y = b.data[[ii, jj, kk]] as f64;
                    sx += x;
                    sy += y;
                    sxx += x * x;
                    syy += y * y;
                    sxy += x * y;
                    n += 1.0;
                }
            }
        }
        let mx = sx / n;
        let my = sy / n;
        let vx = (sxx / n - mx * mx).max(0.0);
        let vy = (syy / n - my * my).max(0.0);
        let cxy = sxy / n - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
            / ((mx * mx + my * my + c1) * (vx + vy + c2));
        count += 1;
    }
    total / count as f64
}

fn dice_oracle(a: &Mask3D, b: &Mask3D) -> f64 {
    let inter = a
        .data
        .iter()
        .zip(b.data.iter())
        .filter(|(&x, &y)| x == 1 && y == 1)
        .count();
    let total = a.count() + b.count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Independent H statistic: ranks via explicit sorted positions, tie groups
/// via value equality, all recomputed from scratch.
fn kruskal_oracle_h(groups: &[Vec<f64>]) -> f64 {
    let mut all: Vec<(f64, usize)> = Vec::new();
    for (g, vals) in groups.iter().enumerate() {
        for &v in vals {
            all.push((v, g));
        }
    }
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let n = all.len() as f64;
    let mut ranks = vec![0.0; all.len()];
    let mut i = 0;
    let mut tie_term = 0.0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg = ((i + 1 + j) as f64) / 2.0; // mean of ranks i+1..=j
        for r in ranks.iter_mut().take(j).skip(i) {
            *r = avg;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let mut h = 0.0;
    for (g, vals) in groups.iter().enumerate() {
        let rsum: f64 = all
            .iter()
            .zip(ranks.iter())
            .filter(|((_, gg), _)| *gg == g)
            .map(|(_, &r)| r)
            .sum();
        h += rsum * rsum / vals.len() as f64;
    }
    h = 12.0 / (n * (n + 1.0)) * h - 3.0 * (n + 1.0);
    let corr = 1.0 - tie_term / (n * n * n - n);
    if corr <= 0.0 {
        0.0
    } else {
        h / corr
    }
}

/// ln Gamma via the Lanczos approximation (independent of statrs).
fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = G[0];
    let t = x + 7.5;
    for (i, &g) in G.iter().enumerate().skip(1) {
        a += g / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Upper tail of a density by Simpson integration with x = tan(theta)
/// compactification.
fn upper_tail<F: Fn(f64) -> f64>(pdf: F, from: f64) -> f64 {
    let a = from.atan();
    let b = std::f64::consts::FRAC_PI_2;
    let n = 20_000;
    let h = (b - a) / n as f64;
    let f = |theta: f64| {
        let x = theta.tan();
        let sec2 = 1.0 + x * x;
        pdf(x) * sec2
    };
    let mut s = f(a);
    for i in 1..n {
        let t = a + i as f64 * h;
        s += if i % 2 == 1 { 4.0 * f(t) } else { 2.0 * f(t) };
    }
    // endpoint b maps to x = inf where the pdf vanishes
    s * h / 3.0
}

fn chi2_sf_oracle(x: f64, k: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let ln_norm = -(k / 2.0) * 2.0f64.ln() - ln_gamma(k / 2.0);
    upper_tail(|t| (ln_norm + (k / 2.0 - 1.0) * t.ln() - t / 2.0).exp(), x)
}

fn t_sf_oracle(t0: f64, nu: f64) -> f64 {
    let ln_norm = ln_gamma((nu + 1.0) / 2.0)
        - ln_gamma(nu / 2.0)
        - 0.5 * (nu * std::f64::consts::PI).ln();
    upper_tail(
        |x| (ln_norm - (nu + 1.0) / 2.0 * (1.0 + x * x / nu).ln()).exp(),
        t0,
    )
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

#[test]
fn criterion_01_metric_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut e_psnr, mut e_ssim, mut e_dice) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let dims = rand_dims(&mut rng);
        let a = rand_volume(&mut rng, dims);
        let b = rand_volume(&mut rng, dims);
        let mut m = rand_mask(&mut rng, dims, 0.6);
        if m.count() == 0 {
            m.data[[0, 0, 0]] = 1;
        }
        e_psnr = e_psnr.max(rel_err(psnr(&a, &b, &m).unwrap(), psnr_oracle(&a, &b, &m)));
        e_ssim = e_ssim.max(rel_err(
            ssim3d_default(&a, &b, &m).unwrap(),
            ssim_oracle(&a, &b, &m),
        ));
        let m2 = rand_mask(&mut rng, dims, 0.4);
        e_dice = e_dice.max(rel_err(dice(&m, &m2).unwrap(), dice_oracle(&m, &m2)));
    }

    let (mut e_kw, mut e_kw_p, mut e_t, mut e_t_p, mut e_ba) =
        (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        // Kruskal-Wallis with deliberate ties via value quantization
        let k = rng.gen_range(2..=5);
        let groups: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                (0..rng.gen_range(4..=12))
                    .map(|_| (rng.gen_range(0.0..10.0f64) * 2.0).round() / 2.0)
                    .collect()
            })
            .collect();
        let (h, p) = stats::kruskal_wallis(&groups).unwrap();
        let h_oracle = kruskal_oracle_h(&groups);
        if h_oracle > 1e-9 {
            e_kw = e_kw.max(rel_err(h, h_oracle));
            e_kw_p = f64::max(e_kw_p, (p - chi2_sf_oracle(h_oracle, (k - 1) as f64)).abs());
        }

        // paired t-test
        let n = rng.gen_range(5..=20);
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| x + rng.gen_range(-0.3..0.3)).collect();
        let (t, p) = stats::paired_t_test(&xs, &ys).unwrap();
        let diffs: Vec<f64> = xs.iter().zip(&ys).map(|(a, b)| a - b).collect();
        let mean = diffs.iter().sum::<f64>() / n as f64;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let t_oracle = mean / (var / n as f64).sqrt();
        e_t = e_t.max(rel_err(t, t_oracle));
        e_t_p = f64::max(e_t_p, (p - 2.0 * t_sf_oracle(t_oracle.abs(), n as f64 - 1.0)).abs());

        // Bland-Altman against the plain formulas
        let (m, s, lo, hi) = stats::bland_altman(&xs, &ys).unwrap();
        let d_mean = -mean; // bland_altman diffs are test - ref
        let d_sd = var.sqrt();
        e_ba = e_ba
            .max((m - d_mean).abs())
            .max((s - d_sd).abs())
            .max((lo - (d_mean - 1.96 * d_sd)).abs())
            .max((hi - (d_mean + 1.96 * d_sd)).abs());
    }

    let elapsed = start.elapsed().as_secs_f64();
    let ok = e_psnr < 1e-6
        && e_ssim < 1e-6
        && e_dice < 1e-6
        && e_kw < 1e-6
        && e_t < 1e-6
        && e_ba < 1e-9
        && e_kw_p < 1e-4
        && e_t_p < 1e-4
        && elapsed < 120.0;
    report(
        1,
        "metric oracle equivalence",
        ok,
        &format!(
            "psnr {e_psnr:.1e}, ssim {e_ssim:.1e}, dice {e_dice:.1e}, kw {e_kw:.1e}/{e_kw_p:.1e}, \
             t {e_t:.1e}/{e_t_p:.1e}, ba {e_ba:.1e}, {elapsed:.1}s"
        ),
    );
}

// ---- criterion 02: gradient check -------------------------------------------

#[test]
fn criterion_02_gradient_check() {
    let start = Instant::now();
    // a small two-conv generator and discriminator on 8x8 inputs, f64
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let in_ch = 4usize;
    let mut g: Net<f64> = build_generator(
        &GeneratorConfig { n: 1, base_width: 2, n_res_blocks: 1 },
        7,
    )
    .unwrap();
    // shrink to two parameterized convolutions for a tight check
    g.nodes.truncate(2); // conv + relu
    g.nodes.push(Node::Conv(fovx_core::model::nn::Conv2d::new(2, 1, 3, 1, 1, &mut rng)));
    g.nodes.push(Node::Sigmoid { cache: None });
    g.in_channels = in_ch;
    // rebuild the first conv for 4 input channels
    g.nodes[0] = Node::Conv(fovx_core::model::nn::Conv2d::new(in_ch, 2, 3, 1, 1, &mut rng));
    // small patch discriminator sized for 8x8 inputs
    let mut d: Net<f64> = Net {
        nodes: vec![
            Node::Conv(fovx_core::model::nn::Conv2d::new(1, 2, 3, 2, 1, &mut rng)),
            Node::LeakyRelu { slope: 0.2, cache: None },
            Node::Conv(fovx_core::model::nn::Conv2d::new(2, 1, 3, 1, 1, &mut rng)),
        ],
        in_channels: 1,
    };

    let x = ndarray::Array4::from_shape_fn((2, in_ch, 8, 8), |(b, c, i, j)| {
        ((b + 2 * c + 3 * i + 5 * j) as f64 * 0.7).sin() * 0.4 + 0.5
    });
    let y = ndarray::Array4::from_shape_fn((2, 1, 8, 8), |(b, _, i, j)| {
        ((b + i * j) as f64 * 0.3).cos() * 0.3 + 0.5
    });

    g.zero_grads();
    d.zero_grads();
    let _ = generator_objective_and_grads(&mut g, &mut d, &x, &y, 100.0, false, false).unwrap();

    // collect analytic grads, then central finite differences
    let mut grads: Vec<(String, Vec<f64>)> = Vec::new();
    g.visit_params(&mut |p| grads.push((p.name.clone(), p.grad.to_vec())));
    let mut max_rel = 0.0f64;
    let eps = 1e-6;
    for (name, analytic) in &grads {
        for idx in 0..analytic.len() {
            let eval_at = |delta: f64| {
                let mut gc = g.clone();
                gc.visit_params(&mut |p| {
                    if &p.name == name {
                        p.value[idx] += delta;
                    }
                });
                let mut dc = d.clone();
                gc.zero_grads();
                dc.zero_grads();
                generator_objective_and_grads(&mut gc, &mut dc, &x, &y, 100.0, false, false)
                    .unwrap()
                    .0
            };
            let fd = (eval_at(eps) - eval_at(-eps)) / (2.0 * eps);
            let a = analytic[idx];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            max_rel = max_rel.max((a - fd).abs() / denom);
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let ok = max_rel < 1e-4 && elapsed < 60.0;
    report(
        2,
        "analytic gradient check",
        ok,
        &format!("max rel err {max_rel:.2e} over {} tensors, {elapsed:.1}s", grads.len()),
    );
}

// ---- criterion 03: compositing fidelity --------------------------------------

fn tiny_constant_bundle(dims: (usize, usize, usize)) -> ModelBundle {
    let cfg = GeneratorConfig { n: 2, base_width: 2, n_res_blocks: 1 };
    let mut generators = BTreeMap::new();
    for key in ["b0_sagittal", "b0_coronal", "b1300_sagittal", "b1300_coronal"] {
        let mut g = build_generator::<f32>(&cfg, 3).unwrap();
        make_constant_output(&mut g, 0.25);
        generators.insert(key.to_string(), g);
    }
    ModelBundle::new(cfg, dims, (1.0, 1.0, 1.0), generators).unwrap()
}

fn two_shell_study(rng: &mut ChaCha8Rng, dims: (usize, usize, usize)) -> Volume4D {
    let mut b0 = rand_volume(rng, dims);
    let mut b1300 = rand_volume(rng, dims);
    // keep intensities clearly positive so no slice looks missing
    b0.data.mapv_inplace(|x| 0.2 + 0.8 * x);
    b1300.data.mapv_inplace(|x| 0.1 + 0.6 * x);
    let gradient = GradientTable::new(
        vec![0.0, 1300.0],
        vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]],
        50.0,
    )
    .unwrap();
    Volume4D::new(vec![b0, b1300], gradient).unwrap()
}

#[test]
fn criterion_03_compositing_fidelity() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(21);

    // property: acquired voxels survive compositing bit-exactly
    let mut composite_ok = true;
    for _ in 0..100 {
        let dims = rand_dims(&mut rng);
        let x = rand_volume(&mut rng, dims);
        let y = rand_volume(&mut rng, dims);
        let m = rand_mask(&mut rng, dims, 0.5);
        let out = composite_output(&x, &y, &m).unwrap();
        for ((o, &xx), (&yy, &mm)) in out
            .data
            .iter()
            .zip(x.data.iter())
            .zip(y.data.iter().zip(m.data.iter()))
        {
            let want = if mm == 1 { xx } else { yy };
            composite_ok &= o.to_bits() == want.to_bits();
        }
    }

    // end-to-end: complete-FOV input imputes to a voxel-identical file
    let dir = tempfile::tempdir().unwrap();
    let dims = (16, 16, 16);
    save_bundle(&tiny_constant_bundle(dims), &dir.path().join("bundle")).unwrap();
    let study = two_shell_study(&mut rng, dims);
    let t1 = rand_volume(&mut rng, dims);
    write_nifti_4d(&study, dir.path().join("s1_dwi.nii.gz")).unwrap();
    fovx_core::dwi::write_gradient_table(
        &study.gradient,
        dir.path().join("s1.bval"),
        dir.path().join("s1.bvec"),
    )
    .unwrap();
    fovx_core::dwi::write_nifti_3d(&t1, dir.path().join("s1_t1.nii.gz")).unwrap();
    std::fs::write(
        dir.path().join("manifest.csv"),
        "subject,dwi,bvals,bvecs,t1,affine,brain_mask,structure_masks,split\n\
         s1,s1_dwi.nii.gz,s1.bval,s1.bvec,s1_t1.nii.gz,identity,,,test\n",
    )
    .unwrap();
    let mut cfg = fovx_core::cli::RunConfig::default();
    cfg.grid_dims = dims;
    cfg.paths.manifest = Some(dir.path().join("manifest.csv"));
    cfg.paths.bundle = Some(dir.path().join("bundle"));
    cfg.paths.out = Some(dir.path().join("out"));
    fovx_core::cli::cmd_impute(&cfg).unwrap();
    let round = read_nifti(dir.path().join("out/s1_fovx.nii.gz"))
        .unwrap()
        .into_4d()
        .unwrap();
    let mut passthrough_ok = round.len() == study.len();
    for (a, b) in round.volumes.iter().zip(study.volumes.iter()) {
        passthrough_ok &= a
            .data
            .iter()
            .zip(b.data.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits());
    }

    let elapsed = start.elapsed().as_secs_f64();
    let ok = composite_ok && passthrough_ok && elapsed < 60.0;
    report(
        3,
        "compositing fidelity",
        ok,
        &format!("composite bit-exact {composite_ok}, complete-FOV passthrough {passthrough_ok}, {elapsed:.1}s"),
    );
}

// ---- criterion 04: round-trips ------------------------------------------------

#[test]
fn criterion_04_round_trips() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let dir = tempfile::tempdir().unwrap();

    // NIfTI write -> read, bit-exact voxels over random volumes
    let mut nifti_ok = true;
    for i in 0..10 {
        let dims = rand_dims(&mut rng);
        let v = rand_volume(&mut rng, dims);
        let path = dir.path().join(format!("v{i}.nii.gz"));
        fovx_core::dwi::write_nifti_3d(&v, &path).unwrap();
        let r = read_nifti(&path).unwrap().into_3d().unwrap();
        nifti_ok &= r.dims == v.dims
            && r
                .data
                .iter()
                .zip(v.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits());
    }

    // bundle save -> load gives bit-identical forward passes
    let cfg = GeneratorConfig { n: 2, base_width: 4, n_res_blocks: 2 };
    let mut generators = BTreeMap::new();
    for (i, key) in ["b0_sagittal", "b0_coronal", "b1300_sagittal", "b1300_coronal"]
        .iter()
        .enumerate()
    {
        generators.insert(key.to_string(), build_generator::<f32>(&cfg, i as u64).unwrap());
    }
    let bundle = ModelBundle::new(cfg.clone(), (16, 16, 16), (1.0, 1.0, 1.0), generators).unwrap();
    save_bundle(&bundle, &dir.path().join("bundle")).unwrap();
    let loaded = load_bundle(&dir.path().join("bundle")).unwrap();
    let x = ndarray::Array4::from_shape_fn((1, cfg.in_channels(), 16, 16), |(_, c, i, j)| {
        ((c + i + 2 * j) as f32 * 0.17).sin()
    });
    let mut bundle_ok = true;
    for key in bundle.generators.keys() {
        let a = bundle.generators[key].forward(&x).unwrap();
        let b = loaded.generators[key].forward(&x).unwrap();
        bundle_ok &= a.iter().zip(b.iter()).all(|(p, q)| p.to_bits() == q.to_bits());
    }

    // identity predictor: slab extract -> center channel -> assemble
    let v = rand_volume(&mut rng, (10, 12, 14));
    let grid = GridSpec::of_volume(&v);
    let mut identity_ok = true;
    for plane in [fovx_core::dwi::Plane::Sagittal, fovx_core::dwi::Plane::Coronal] {
        let dim = match plane.axis() {
            0 => v.dims.0,
            1 => v.dims.1,
            _ => v.dims.2,
        };
        let slices: Vec<_> = (0..dim)
            .map(|idx| {
                let slab = extract_slab(&v, &v, plane, idx, 3).unwrap();
                Some(slab.channels.index_axis(Axis(0), 3).to_owned())
            })
            .collect();
        let out = assemble_plane(&slices, plane, &grid).unwrap();
        identity_ok &= out.data == v.data;
    }

    let elapsed = start.elapsed().as_secs_f64();
    let ok = nifti_ok && bundle_ok && identity_ok && elapsed < 60.0;
    report(
        4,
        "round trips",
        ok,
        &format!("nifti {nifti_ok}, bundle {bundle_ok}, identity-predictor {identity_ok}, {elapsed:.1}s"),
    );
}

// ---- criterion 05: ADC recovery ------------------------------------------------

#[test]
fn criterion_05_adc_recovery() {
    let start = Instant::now();
    let spec = phantom_spec(3, 40);
    let (p, study) = phantom_study(&spec);
    let brain = &p.structure_masks["brain"];
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (v, &b) in study.gradient.bvals.iter().enumerate() {
        if b <= 50.0 {
            continue;
        }
        let adc = adc_map(&study, v).unwrap();
        let g = study.gradient.bvecs[v];
        for ((i, j, k), &m) in brain.data.indexed_iter() {
            if m != 1 {
                continue;
            }
            let truth = g[0] * g[0] * p.tensors.dxx[[i, j, k]]
                + g[1] * g[1] * p.tensors.dyy[[i, j, k]]
                + g[2] * g[2] * p.tensors.dzz[[i, j, k]]
                + 2.0 * g[0] * g[1] * p.tensors.dxy[[i, j, k]]
                + 2.0 * g[0] * g[2] * p.tensors.dxz[[i, j, k]]
                + 2.0 * g[1] * g[2] * p.tensors.dyz[[i, j, k]];
            max_rel = max_rel.max((adc.data[[i, j, k]] as f64 - truth).abs() / truth.abs());
            checked += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let ok = max_rel < 1e-5 && checked > 0 && elapsed < 60.0;
    report(
        5,
        "adc recovery",
        ok,
        &format!("max rel err {max_rel:.2e} over {checked} voxel-directions x 40 dirs, {elapsed:.1}s"),
    );
}

// ---- trained fixture for criteria 06-09 -----------------------------------------

const GRID: (usize, usize, usize) = (64, 64, 64);

struct Trained {
    bundle: ModelBundle,
    init_val: f64,
    best_val: f64,
    train_secs: f64,
}

struct HeldOut {
    truth: Volume4D,
    cut_study: Volume4D,
    imputed: Volume4D,
    brain: Mask3D,
    cut: FovCut,
}

fn gen_cfg() -> GeneratorConfig {
    GeneratorConfig { n: 7, base_width: 8, n_res_blocks: 3 }
}

fn normalized_sample(name: &str, study: &Volume4D, t1: &Volume3D) -> TrainSample {
    let (ns, _) = normalize_intensity(study).unwrap();
    let (nt, _) = normalize_t1(t1).unwrap();
    let (s, t, _) = to_normalized_space(&ns, &nt, &IDENTITY_AFFINE, GRID).unwrap();
    TrainSample { subject: name.to_string(), study: s, t1: t }
}

/// Optional cache directory for the expensive trained fixture, enabled by
/// setting FOVX_ACCEPTANCE_CACHE to a writable directory. Saved bundles
/// reload bit-identically (criterion 04), so cached runs are equivalent.
fn cache_dir() -> Option<std::path::PathBuf> {
    std::env::var_os("FOVX_ACCEPTANCE_CACHE").map(std::path::PathBuf::from)
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        if let Some(dir) = cache_dir() {
            if let Ok(bundle) = load_bundle(&dir.join("bundle")) {
                let meta = std::fs::read_to_string(dir.join("bundle_meta.txt")).unwrap();
                let vals: Vec<f64> =
                    meta.split_whitespace().map(|s| s.parse().unwrap()).collect();
                return Trained {
                    bundle,
                    init_val: vals[0],
                    best_val: vals[1],
                    train_secs: vals[2],
                };
            }
        }
        let start = Instant::now();
        let mut train_set = Vec::new();
        let mut val_set = Vec::new();
        for i in 0..20u64 {
            let spec = phantom_spec(i, 6);
            let (p, study) = phantom_study(&spec);
            let sample = normalized_sample(&format!("p{i:03}"), &study, &p.t1);
            if i < 16 {
                train_set.push(sample);
            } else {
                val_set.push(sample);
            }
        }
        let tcfg = TrainConfig {
            max_steps: 360,
            val_interval: 40,
            batch_size: 4,
            cut_range_mm: (0.0, 50.0),
            seed: 0,
            ..TrainConfig::default()
        };
        let dcfg = DiscriminatorConfig { base_width: 8, conditional_on_input: false };
        let (bundle, log) = train(&train_set, &val_set, &gen_cfg(), &dcfg, &tcfg).unwrap();
        let init_val = log.first().map(|r| r.val_l1_imputed).unwrap();
        let best_val = log.iter().map(|r| r.val_l1_imputed).fold(f64::INFINITY, f64::min);
        let train_secs = start.elapsed().as_secs_f64();
        if let Some(dir) = cache_dir() {
            std::fs::create_dir_all(&dir).unwrap();
            save_bundle(&bundle, &dir.join("bundle")).unwrap();
            std::fs::write(
                dir.join("bundle_meta.txt"),
                format!("{init_val} {best_val} {train_secs}"),
            )
            .unwrap();
        }
        Trained { bundle, init_val, best_val, train_secs }
    })
}

use fovx_core::model::train;

fn held_out() -> &'static Vec<HeldOut> {
    static CELL: OnceLock<Vec<HeldOut>> = OnceLock::new();
    CELL.get_or_init(|| {
        let bundle = &trained().bundle;
        (0..10u64)
            .map(|i| {
                let spec = phantom_spec(200 + i, 6);
                let (p, truth) = phantom_study(&spec);
                let side = if i % 2 == 0 { CutSide::Bottom } else { CutSide::Top };
                let (cut_study, cut, _) = simulate_cutoff(&truth, 30.0, side).unwrap();
                let cached = cache_dir().map(|d| d.join(format!("heldout_{i}_imputed.nii.gz")));
                let imputed = match cached
                    .as_ref()
                    .and_then(|p| read_nifti(p).ok())
                    .and_then(|img| img.into_4d().ok())
                {
                    Some(vol) => vol.with_gradient(cut_study.gradient.clone()).unwrap(),
                    None => {
                        let vol =
                            impute_study(&cut_study, &p.t1, &IDENTITY_AFFINE, bundle).unwrap();
                        if let Some(path) = &cached {
                            write_nifti_4d(&vol, path).unwrap();
                        }
                        vol
                    }
                };
                HeldOut {
                    truth,
                    cut_study,
                    imputed,
                    brain: p.structure_masks["brain"].clone(),
                    cut,
                }
            })
            .collect()
    })
}

/// Replicate the nearest acquired slice into the missing slab.
fn nearest_slice_baseline(cut_study: &Volume4D, cut: &FovCut) -> Volume4D {
    let mut out = cut_study.clone();
    let nz = cut_study.grid().dims.2;
    let src = match cut.side {
        CutSide::Bottom => cut.slice_range.1.min(nz - 1),
        CutSide::Top => cut.slice_range.0.saturating_sub(1),
        CutSide::None => return out,
    };
    for vol in &mut out.volumes {
        let nearest = vol.data.index_axis(Axis(2), src).to_owned();
        for k in cut.slice_range.0..cut.slice_range.1 {
            vol.data.index_axis_mut(Axis(2), k).assign(&nearest);
        }
    }
    out
}

/// Brain voxels restricted to the missing slab.
fn imputed_brain_region(brain: &Mask3D, cut: &FovCut) -> Mask3D {
    let mut region = brain.clone();
    for k in 0..region.dims.2 {
        if !(cut.slice_range.0..cut.slice_range.1).contains(&k) {
            region.data.index_axis_mut(Axis(2), k).fill(0);
        }
    }
    region
}

/// The full missing slab: every voxel of every imputed slice.
fn imputed_slab_region(like: &Mask3D, cut: &FovCut) -> Mask3D {
    let mut region = like.clone();
    region.data.fill(0);
    for k in cut.slice_range.0..cut.slice_range.1 {
        region.data.index_axis_mut(Axis(2), k).fill(1);
    }
    region
}

#[test]
fn criterion_06_training_smoke_and_baseline() {
    let t = trained();
    let halved = t.best_val <= 0.5 * t.init_val;
    let in_budget = t.train_secs < 1800.0;

    let mut d_psnr = Vec::new();
    let mut d_ssim = Vec::new();
    for h in held_out() {
        let baseline = nearest_slice_baseline(&h.cut_study, &h.cut);
        let region = imputed_slab_region(&h.brain, &h.cut);
        if region.count() == 0 {
            continue;
        }
        for v in 0..h.truth.len() {
            let p_model = psnr(&h.truth.volumes[v], &h.imputed.volumes[v], &region).unwrap();
            let p_base = psnr(&h.truth.volumes[v], &baseline.volumes[v], &region).unwrap();
            let s_model = ssim3d_default(&h.truth.volumes[v], &h.imputed.volumes[v], &region).unwrap();
            let s_base = ssim3d_default(&h.truth.volumes[v], &baseline.volumes[v], &region).unwrap();
            d_psnr.push(p_model - p_base);
            d_ssim.push(s_model - s_base);
        }
    }
    let mean_dp = d_psnr.iter().sum::<f64>() / d_psnr.len() as f64;
    let mean_ds = d_ssim.iter().sum::<f64>() / d_ssim.len() as f64;
    let ok = halved && in_budget && mean_dp >= 2.0 && mean_ds > 0.0;
    report(
        6,
        "training smoke + baseline beat",
        ok,
        &format!(
            "val L1 {:.4} -> {:.4} (halved {halved}), train {:.0}s, \
             psnr margin {mean_dp:+.2} dB, ssim margin {mean_ds:+.4} over {} volumes",
            t.init_val,
            t.best_val,
            t.train_secs,
            d_psnr.len()
        ),
    );
}

#[test]
fn criterion_07_distance_trend() {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for h in held_out() {
        for shell in [ShellId::B0, ShellId::B1300] {
            let v = h
                .truth
                .gradient
                .bvals
                .iter()
                .position(|&b| match shell {
                    ShellId::B0 => b <= 50.0,
                    ShellId::B1300 => b > 50.0,
                })
                .unwrap();
            for (d, p, _) in
                per_distance_curve(&h.truth.volumes[v], &h.imputed.volumes[v], &h.cut, &h.brain)
                    .unwrap()
            {
                if p.is_finite() {
                    xs.push(d);
                    ys.push(p);
                }
            }
        }
    }
    let (rho, p) = stats::spearman(&xs, &ys).unwrap();
    let ok = rho > 0.0 && p < 0.05;
    report(
        7,
        "psnr-vs-distance ascending trend",
        ok,
        &format!("spearman rho {rho:.3}, p {p:.2e}, {} slice points", xs.len()),
    );
}

#[test]
fn criterion_08_dice_improvement() {
    // threshold segmentation of the brain from the mean DWI signal
    let seg = |study: &Volume4D| -> Mask3D {
        let grid = study.grid();
        let mut mean = Volume3D::zeros(grid.dims, grid.spacing, grid.affine);
        for v in &study.volumes {
            mean.data += &v.data;
        }
        mean.data.mapv_inplace(|x| x / study.len() as f32);
        let peak = mean.data.iter().cloned().fold(0.0f32, f32::max);
        Mask3D::from_volume_threshold(&mean, 0.1 * peak)
    };
    let mut cut_dice = Vec::new();
    let mut imp_dice = Vec::new();
    for h in held_out() {
        let reference = seg(&h.truth);
        cut_dice.push(dice(&reference, &seg(&h.cut_study)).unwrap());
        imp_dice.push(dice(&reference, &seg(&h.imputed)).unwrap());
    }
    let improved = cut_dice
        .iter()
        .zip(&imp_dice)
        .filter(|(c, i)| i > c)
        .count();
    let (t, p) = stats::paired_t_test(&imp_dice, &cut_dice).unwrap();
    let ok = improved >= 10 && t > 0.0 && p < 0.05;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    report(
        8,
        "dice improvement over cut input",
        ok,
        &format!(
            "improved {improved}/10, dice {:.3} -> {:.3}, t {t:.2}, p {p:.2e}",
            mean(&cut_dice),
            mean(&imp_dice)
        ),
    );
}

#[test]
fn criterion_09_adc_direction_invariance() {
    let bundle = &trained().bundle;
    // held-out 40-direction phantoms imputed with the shared bundle
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); 40];
    for i in 0..3u64 {
        let spec = phantom_spec(300 + i, 40);
        let (p, truth) = phantom_study(&spec);
        let side = if i % 2 == 0 { CutSide::Bottom } else { CutSide::Top };
        let (cut_study, cut, _) = simulate_cutoff(&truth, 30.0, side).unwrap();
        let imputed = impute_study(&cut_study, &p.t1, &IDENTITY_AFFINE, bundle).unwrap();
        let region = imputed_brain_region(&p.structure_masks["brain"], &cut);
        if region.count() == 0 {
            continue;
        }
        let mut dir_idx = 0usize;
        for (v, &b) in truth.gradient.bvals.iter().enumerate() {
            if b <= 50.0 {
                continue;
            }
            let ref_adc = adc_map(&truth, v).unwrap();
            let test_adc = adc_map(&imputed, v).unwrap();
            // normalize by the reference ADC peak so PSNR is scale-free
            let peak = ref_adc
                .data
                .iter()
                .zip(region.data.iter())
                .filter(|(_, &m)| m == 1)
                .map(|(&x, _)| x.abs())
                .fold(0.0f32, f32::max);
            let scale = |v: &Volume3D| {
                let mut o = v.clone();
                o.data.mapv_inplace(|x| x / peak);
                o
            };
            let p = psnr(&scale(&ref_adc), &scale(&test_adc), &region).unwrap();
            if p.is_finite() {
                groups[dir_idx].push(p);
            }
            dir_idx += 1;
        }
    }
    let groups: Vec<Vec<f64>> = groups.into_iter().filter(|g| g.len() >= 2).collect();
    let (h, p) = stats::kruskal_wallis(&groups).unwrap();
    let ok = groups.len() >= 30 && p > 0.05;
    report(
        9,
        "adc per-direction invariance",
        ok,
        &format!("kruskal-wallis H {h:.2} over {} directions, p {p:.3}", groups.len()),
    );
}

// ---- criterion 10: QA estimator --------------------------------------------------

#[test]
fn criterion_10_qa_estimator() {
    let start = Instant::now();
    let mut max_err_slices = 0.0f64;
    let mut worst = String::new();
    for i in 0..50u64 {
        let spec = phantom_spec(500 + i, 1);
        let (p, study) = phantom_study(&spec);
        let brain = &p.structure_masks["brain"];
        let extent = 1.0 + (i as f64 * 31.0 / 49.0); // 1..32 mm
        let side = if i % 2 == 0 { CutSide::Bottom } else { CutSide::Top };
        let (cut_study, cut, _) = simulate_cutoff(&study, extent, side).unwrap();
        let acquired = compute_acquired_mask(&cut_study);
        let (mm, _) = estimate_cutoff_thickness(&acquired, brain).unwrap();

        // truth: slices of brain hidden by the cut, measured against the
        // signal extent of the uncut study
        let full = compute_acquired_mask(&study);
        let any = |m: &Mask3D, k: usize| m.data.index_axis(Axis(2), k).iter().any(|&x| x == 1);
        let nz = brain.dims.2;
        let brain_lo = (0..nz).find(|&k| any(brain, k)).unwrap();
        let brain_hi = (0..nz).rev().find(|&k| any(brain, k)).unwrap();
        let full_lo = (0..nz).find(|&k| any(&full, k)).unwrap();
        let full_hi = (0..nz).rev().find(|&k| any(&full, k)).unwrap();
        let expected = match cut.side {
            CutSide::Bottom => {
                let acq_lo = cut.slice_range.1.max(full_lo);
                (acq_lo as f64 - brain_lo as f64).max(0.0)
            }
            CutSide::Top => {
                let acq_hi = (cut.slice_range.0.saturating_sub(1)).min(full_hi);
                (brain_hi as f64 - acq_hi as f64).max(0.0)
            }
            CutSide::None => 0.0,
        };
        let err = (mm - expected).abs(); // 1 mm slices
        if err > max_err_slices {
            max_err_slices = err;
            worst = format!("seed {} extent {extent:.1}mm est {mm} want {expected}", 500 + i);
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let ok = max_err_slices <= 1.0;
    report(
        10,
        "qa cutoff estimator",
        ok,
        &format!("max error {max_err_slices:.1} slices over 50 phantoms ({worst}), {elapsed:.1}s"),
    );
}
