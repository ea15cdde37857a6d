//! Adversarial training: the GAN/L1 objective, the optimizer, and the
//! four-generator training loop with random FOV cutoffs and
//! imputed-region validation.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dwi::{classify_shell, Plane, ShellConfig, ShellId, Volume3D, Volume4D};
use crate::error::{FovxError, Result};
use crate::fov::{draw_training_cut, simulate_cutoff, FovCut, Mask3D};
use crate::model::bundle::ModelBundle;
use crate::model::nn::{
    build_discriminator, build_generator, stack_slices, DiscriminatorConfig, GeneratorConfig,
    Net, Scalar, Tensor,
};
use crate::patch::extract_slab;

/// Probabilities are clamped away from {0, 1} by this before any log.
pub const LOGIT_EPS: f64 = 1e-7;

fn ln_clamped<F: Scalar>(p: F) -> F {
    p.max(F::from_f(LOGIT_EPS)).ln()
}

/// Discriminator objective value (to be maximized): mean log of real scores
/// plus mean log of one-minus-fake scores. Inputs are probabilities in
/// (0, 1) — sigmoid already applied.
pub fn gan_loss<F: Scalar>(d_real: &Tensor<F>, d_fake: &Tensor<F>) -> F {
    let nr = F::from_usize(d_real.len()).unwrap();
    let nf = F::from_usize(d_fake.len()).unwrap();
    let real = d_real.iter().fold(F::zero(), |a, &p| a + ln_clamped(p)) / nr;
    let fake = d_fake
        .iter()
        .fold(F::zero(), |a, &p| a + ln_clamped(F::one() - p))
        / nf;
    real + fake
}

/// Mean absolute difference over all elements.
pub fn l1_loss<F: Scalar>(target: &Tensor<F>, pred: &Tensor<F>) -> Result<F> {
    if target.dim() != pred.dim() {
        return Err(FovxError::Shape(format!(
            "l1 shapes differ: {:?} vs {:?}",
            target.dim(),
            pred.dim()
        )));
    }
    let n = F::from_usize(target.len()).unwrap();
    Ok(target
        .iter()
        .zip(pred.iter())
        .fold(F::zero(), |a, (&t, &p)| a + (t - p).abs())
        / n)
}

/// Scalar combination the generator minimizes.
pub fn combined_generator_objective(gan_term: f64, l1_term: f64, lambda: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(FovxError::Validation("lambda must be >= 0".into()));
    }
    Ok(gan_term + lambda * l1_term)
}

fn sigmoid_t<F: Scalar>(t: &Tensor<F>) -> Tensor<F> {
    t.mapv(|x| F::one() / (F::one() + (-x).exp()))
}

/// Full generator-step objective with analytic gradients accumulated into
/// `g` (and, incidentally, `d`, whose parameters the caller must not step).
/// Returns (loss, l1 term). Exposed so the finite-difference check can
/// exercise exactly the code path used in training.
pub fn generator_objective_and_grads<F: Scalar>(
    g: &mut Net<F>,
    d: &mut Net<F>,
    x: &Tensor<F>,
    y: &Tensor<F>,
    lambda: f64,
    saturating: bool,
    conditional: bool,
) -> Result<(F, F)> {
    let pred = g.forward_train(x)?;
    let d_in = if conditional { concat_channels(&pred, x) } else { pred.clone() };
    let logits = d.forward_train(&d_in)?;
    let probs = sigmoid_t(&logits);
    let eps = F::from_f(LOGIT_EPS);
    let n = F::from_usize(probs.len()).unwrap();
    let adv = if saturating {
        probs
            .iter()
            .fold(F::zero(), |a, &p| a + ln_clamped(F::one() - p))
            / n
    } else {
        -(probs.iter().fold(F::zero(), |a, &p| a + ln_clamped(p)) / n)
    };
    let l1 = l1_loss(y, &pred)?;
    let loss = adv + F::from_f(lambda) * l1;

    // d(adv)/d(logit); clamped entries contribute zero gradient
    let mut dlogits = logits.clone();
    for (dl, &p) in dlogits.iter_mut().zip(probs.iter()) {
        *dl = if saturating {
            if F::one() - p > eps { -p / n } else { F::zero() }
        } else if p > eps {
            -(F::one() - p) / n
        } else {
            F::zero()
        };
    }
    let d_input_grad = d.backward(&dlogits)?;
    // keep only the predicted-slice channel when D is conditional
    let mut dpred = if conditional {
        d_input_grad.slice(ndarray::s![.., 0..1, .., ..]).to_owned()
    } else {
        d_input_grad
    };
    // + lambda * d(L1)/d(pred)
    let m = F::from_usize(pred.len()).unwrap();
    let lam = F::from_f(lambda);
    for (dp, (&p, &t)) in dpred.iter_mut().zip(pred.iter().zip(y.iter())) {
        let s = if p > t {
            F::one()
        } else if p < t {
            -F::one()
        } else {
            F::zero()
        };
        *dp = *dp + lam * s / m;
    }
    g.backward(&dpred)?;
    Ok((loss, l1))
}

/// Loss-only twin of `generator_objective_and_grads` (no caches touched).
pub fn generator_objective<F: Scalar>(
    g: &Net<F>,
    d: &Net<F>,
    x: &Tensor<F>,
    y: &Tensor<F>,
    lambda: f64,
    saturating: bool,
    conditional: bool,
) -> Result<F> {
    let pred = g.forward(x)?;
    let d_in = if conditional { concat_channels(&pred, x) } else { pred.clone() };
    let probs = sigmoid_t(&d.forward(&d_in)?);
    let n = F::from_usize(probs.len()).unwrap();
    let adv = if saturating {
        probs
            .iter()
            .fold(F::zero(), |a, &p| a + ln_clamped(F::one() - p))
            / n
    } else {
        -(probs.iter().fold(F::zero(), |a, &p| a + ln_clamped(p)) / n)
    };
    Ok(adv + F::from_f(lambda) * l1_loss(y, &pred)?)
}

fn concat_channels<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("batch/spatial dims match")
}

// ---- optimizer ------------------------------------------------------------

/// Adaptive moment estimation over a network's parameter tensors, matched
/// by visitation order.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64) -> Self {
        Self { lr, beta1, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step<F: Scalar>(&mut self, net: &mut Net<F>) {
        self.t += 1;
        let (b1, b2, lr, eps, t) = (self.beta1, self.beta2, self.lr, self.eps, self.t);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let mut idx = 0usize;
        let (ms, vs) = (&mut self.m, &mut self.v);
        net.visit_params(&mut |p| {
            if ms.len() == idx {
                ms.push(vec![0.0; p.value.len()]);
                vs.push(vec![0.0; p.value.len()]);
            }
            let m = &mut ms[idx];
            let v = &mut vs[idx];
            for i in 0..p.value.len() {
                let g = p.grad[i].to_f64_();
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                p.value[i] = F::from_f(p.value[i].to_f64_() - update);
            }
            idx += 1;
        });
    }
}

// ---- training loop --------------------------------------------------------

/// One training or validation case, already resampled to the shared
/// normalized grid with normalized intensities.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub subject: String,
    pub study: Volume4D,
    pub t1: Volume3D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_l1: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub val_interval: usize,
    pub cut_range_mm: (f64, f64),
    pub seed: u64,
    /// Eq.-as-printed saturating generator loss instead of -log D(G).
    pub saturating_g_loss: bool,
    /// Fixed validation cutoff extent.
    pub val_cut_mm: f64,
    /// Slices sampled per (volume, plane) when scoring validation cases.
    pub val_slices: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_l1: 100.0,
            learning_rate: 2e-4,
            beta1: 0.5,
            batch_size: 4,
            max_steps: 200,
            val_interval: 50,
            cut_range_mm: (0.0, 50.0),
            seed: 0,
            saturating_g_loss: false,
            val_cut_mm: 30.0,
            val_slices: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_l1 < 0.0 {
            return Err(FovxError::Config("lambda_l1 must be >= 0".into()));
        }
        let (lo, hi) = self.cut_range_mm;
        if !(0.0..=50.0).contains(&lo) || !(0.0..=50.0).contains(&hi) || lo > hi {
            return Err(FovxError::Config("cut_range_mm must satisfy 0 <= lo <= hi <= 50".into()));
        }
        if self.batch_size == 0 || self.max_steps == 0 || self.val_interval == 0 {
            return Err(FovxError::Config(
                "batch_size, max_steps, val_interval must be >= 1".into(),
            ));
        }
        if self.val_slices == 0 {
            return Err(FovxError::Config("val_slices must be >= 1".into()));
        }
        Ok(())
    }
}

/// One CSV row per validation point of the training log.
#[derive(Debug, Clone, Serialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub d_loss: f64,
    pub g_gan: f64,
    pub g_l1: f64,
    pub val_l1_imputed: f64,
}

pub fn write_training_log(path: &std::path::Path, rows: &[TrainLogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(["step", "d_loss", "g_gan", "g_l1", "val_l1_imputed"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub const DISPATCH_PLANES: [Plane; 2] = [Plane::Sagittal, Plane::Coronal];

pub fn generator_key(shell: ShellId, plane: Plane) -> String {
    format!("{}_{}", shell.name(), plane.name())
}

fn shell_indices(study: &Volume4D, shells: &ShellConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut b0 = Vec::new();
    let mut b1300 = Vec::new();
    for (i, &b) in study.gradient.bvals.iter().enumerate() {
        match classify_shell(b, shells)? {
            ShellId::B0 => b0.push(i),
            ShellId::B1300 => b1300.push(i),
        }
    }
    Ok((b0, b1300))
}

fn check_shell_coverage(set: &[TrainSample], shells: &ShellConfig, what: &str) -> Result<()> {
    let mut has_b0 = false;
    let mut has_b1300 = false;
    for s in set {
        let (b0, b1300) = shell_indices(&s.study, shells)
            .map_err(|e| FovxError::Config(format!("{what} set: {e}")))?;
        has_b0 |= !b0.is_empty();
        has_b1300 |= !b1300.is_empty();
    }
    if !has_b0 || !has_b1300 {
        return Err(FovxError::Config(format!(
            "{what} set must contain both b0 and b1300 volumes"
        )));
    }
    Ok(())
}

struct ValCase {
    cut_study: Volume4D,
    truth: Volume4D,
    t1: Volume3D,
    mask: Mask3D,
    cut: FovCut,
    b0: Vec<usize>,
    b1300: Vec<usize>,
}

fn evenly_spaced(n_total: usize, n_pick: usize) -> Vec<usize> {
    let n_pick = n_pick.min(n_total);
    (0..n_pick)
        .map(|i| (i * n_total + n_total / 2) / n_pick)
        .collect()
}

/// Mean |pred - truth| over imputed (mask = 0) voxels of sampled slices.
fn validation_l1(
    generators: &BTreeMap<String, Net<f32>>,
    gcfg: &GeneratorConfig,
    cases: &[ValCase],
    val_slices: usize,
) -> Result<f64> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for case in cases {
        if case.cut.n_slices() == 0 {
            continue;
        }
        for (shell, vols) in [(ShellId::B0, &case.b0), (ShellId::B1300, &case.b1300)] {
            for &v in vols.iter() {
                let cut_vol = &case.cut_study.volumes[v];
                let truth_vol = &case.truth.volumes[v];
                for plane in DISPATCH_PLANES {
                    let net = &generators[&generator_key(shell, plane)];
                    let dim = match plane.axis() {
                        0 => cut_vol.dims.0,
                        _ => cut_vol.dims.1,
                    };
                    let picks = evenly_spaced(dim, val_slices);
                    let slabs: Vec<Tensor<f32>> = picks
                        .iter()
                        .map(|&idx| {
                            extract_slab(cut_vol, &case.t1, plane, idx, gcfg.n)
                                .map(|s| slab_to_tensor(&s.channels))
                        })
                        .collect::<Result<_>>()?;
                    let batch = ndarray::concatenate(
                        Axis(0),
                        &slabs.iter().map(|t| t.view()).collect::<Vec<_>>(),
                    )
                    .expect("uniform slab shapes");
                    let pred = net.forward(&batch)?;
                    for (bi, &idx) in picks.iter().enumerate() {
                        let truth_slice = truth_vol.data.index_axis(Axis(plane.axis()), idx);
                        let mask_slice = case.mask.data.index_axis(Axis(plane.axis()), idx);
                        let pred_slice = pred.index_axis(Axis(0), bi);
                        let pred_slice = pred_slice.index_axis(Axis(0), 0);
                        for ((t, p), &m) in truth_slice
                            .iter()
                            .zip(pred_slice.iter())
                            .zip(mask_slice.iter())
                        {
                            if m == 0 {
                                total += (*t as f64 - *p as f64).abs();
                                count += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    if count == 0 {
        return Err(FovxError::Data("validation cases have no imputed voxels".into()));
    }
    Ok(total / count as f64)
}

fn slab_to_tensor(channels: &ndarray::Array3<f32>) -> Tensor<f32> {
    let (c, h, w) = channels.dim();
    channels
        .clone()
        .into_shape_with_order((1, c, h, w))
        .expect("contiguous slab")
}

fn slice_to_target(vol: &Volume3D, plane: Plane, idx: usize) -> Array2<f32> {
    vol.data.index_axis(Axis(plane.axis()), idx).to_owned()
}

/// Train the four shell x plane generators per the random-cutoff procedure
/// and return the bundle that minimized imputed-region validation L1,
/// together with the training log.
pub fn train(
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    gcfg: &GeneratorConfig,
    dcfg: &DiscriminatorConfig,
    tcfg: &TrainConfig,
) -> Result<(ModelBundle, Vec<TrainLogRow>)> {
    gcfg.validate()?;
    tcfg.validate()?;
    if train_set.is_empty() {
        return Err(FovxError::Config("empty training set".into()));
    }
    if val_set.is_empty() {
        return Err(FovxError::Config("empty validation set".into()));
    }
    let shells = ShellConfig::default();
    check_shell_coverage(train_set, &shells, "train")?;
    check_shell_coverage(val_set, &shells, "validation")?;
    let grid0 = train_set[0].study.grid();
    if grid0.dims.0 % 4 != 0 || grid0.dims.1 % 4 != 0 || grid0.dims.2 % 4 != 0 {
        return Err(FovxError::Config(
            "normalized grid dims must be divisible by 4".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);

    // Mean target intensity per shell over the training set; the output
    // head starts at this base rate so that mostly-background slices do
    // not push it into saturation before structure is learned.
    let mut shell_mean = BTreeMap::new();
    for shell in [ShellId::B0, ShellId::B1300] {
        let (mut sum, mut n) = (0.0f64, 0usize);
        for s in train_set {
            let (b0, b1300) = shell_indices(&s.study, &shells)?;
            let vols = if shell == ShellId::B0 { &b0 } else { &b1300 };
            for &v in vols {
                sum += s.study.volumes[v].data.iter().map(|&x| x as f64).sum::<f64>();
                n += s.study.volumes[v].data.len();
            }
        }
        let mean = (sum / n.max(1) as f64).clamp(1e-3, 0.5);
        shell_mean.insert(shell, mean);
    }

    let mut generators: BTreeMap<String, Net<f32>> = BTreeMap::new();
    let mut discriminators: BTreeMap<String, Net<f32>> = BTreeMap::new();
    let mut g_opt: BTreeMap<String, Adam> = BTreeMap::new();
    let mut d_opt: BTreeMap<String, Adam> = BTreeMap::new();
    for (i, shell) in [ShellId::B0, ShellId::B1300].into_iter().enumerate() {
        for (j, plane) in DISPATCH_PLANES.into_iter().enumerate() {
            let key = generator_key(shell, plane);
            let sub = tcfg.seed ^ (0x9e3779b97f4a7c15u64.wrapping_mul((i * 2 + j + 1) as u64));
            let mut g = build_generator(gcfg, sub)?;
            g.init_output_bias(shell_mean[&shell]);
            generators.insert(key.clone(), g);
            discriminators.insert(key.clone(), build_discriminator(dcfg, gcfg, sub ^ 0xd1b5)?);
            g_opt.insert(key.clone(), Adam::new(tcfg.learning_rate, tcfg.beta1));
            d_opt.insert(key.clone(), Adam::new(tcfg.learning_rate, tcfg.beta1));
        }
    }

    // fixed validation cuts, drawn once
    let mut val_cases = Vec::with_capacity(val_set.len());
    for (i, s) in val_set.iter().enumerate() {
        let side = if i % 2 == 0 { crate::fov::CutSide::Bottom } else { crate::fov::CutSide::Top };
        let (cut_study, cut, mask) = simulate_cutoff(&s.study, tcfg.val_cut_mm, side)?;
        let (b0, b1300) = shell_indices(&s.study, &shells)?;
        val_cases.push(ValCase {
            cut_study,
            truth: s.study.clone(),
            t1: s.t1.clone(),
            mask,
            cut,
            b0,
            b1300,
        });
    }

    let mut log = Vec::new();
    let mut best_val = validation_l1(&generators, gcfg, &val_cases, tcfg.val_slices)?;
    let init_val = best_val;
    let mut best_gens = generators.clone();
    log.push(TrainLogRow { step: 0, d_loss: 0.0, g_gan: 0.0, g_l1: 0.0, val_l1_imputed: init_val });

    let mut last_d = 0.0;
    let mut last_gan = 0.0;
    let mut last_l1 = 0.0;
    for step in 1..=tcfg.max_steps {
        let s = &train_set[rng.gen_range(0..train_set.len())];
        let (extent, side) = draw_training_cut(&mut rng, tcfg.cut_range_mm);
        let (cut_study, _cut, _mask) = simulate_cutoff(&s.study, extent, side)?;
        let (b0, b1300) = shell_indices(&s.study, &shells)?;
        for (shell, indices) in [(ShellId::B0, &b0), (ShellId::B1300, &b1300)] {
            if indices.is_empty() {
                continue;
            }
            let v = indices[rng.gen_range(0..indices.len())];
            let cut_vol = &cut_study.volumes[v];
            let truth_vol = &s.study.volumes[v];
            for plane in DISPATCH_PLANES {
                let key = generator_key(shell, plane);
                let dim = match plane.axis() {
                    0 => cut_vol.dims.0,
                    _ => cut_vol.dims.1,
                };
                // whole-volume targets: any center slice is fair game
                let centers: Vec<usize> =
                    (0..tcfg.batch_size).map(|_| rng.gen_range(0..dim)).collect();
                let mut slabs = Vec::with_capacity(centers.len());
                let mut targets = Vec::with_capacity(centers.len());
                for &c in &centers {
                    slabs.push(slab_to_tensor(
                        &extract_slab(cut_vol, &s.t1, plane, c, gcfg.n)?.channels,
                    ));
                    targets.push(slice_to_target(truth_vol, plane, c));
                }
                let x = ndarray::concatenate(
                    Axis(0),
                    &slabs.iter().map(|t| t.view()).collect::<Vec<_>>(),
                )
                .expect("uniform slab shapes");
                let y = stack_slices(&targets);

                let g = generators.get_mut(&key).expect("key built above");
                let d = discriminators.get_mut(&key).expect("key built above");

                // --- discriminator step: maximize Eq. 1 ---
                let fake = g.forward(&x)?; // detached: no G caches
                let (real_in, fake_in) = if dcfg.conditional_on_input {
                    (concat_channels(&y, &x), concat_channels(&fake, &x))
                } else {
                    (y.clone(), fake.clone())
                };
                d.zero_grads();
                let pr = sigmoid_t(&d.forward_train(&real_in)?);
                let nr = pr.len() as f32;
                let eps = LOGIT_EPS as f32;
                let mut dl_real = pr.clone();
                dl_real.mapv_inplace(|p| if p > eps { -(1.0 - p) / nr } else { 0.0 });
                d.backward(&dl_real)?;
                let pf = sigmoid_t(&d.forward_train(&fake_in)?);
                let nf = pf.len() as f32;
                let mut dl_fake = pf.clone();
                dl_fake.mapv_inplace(|p| if 1.0 - p > eps { p / nf } else { 0.0 });
                d.backward(&dl_fake)?;
                last_d = -(gan_loss(&pr, &pf) as f64);
                d_opt.get_mut(&key).unwrap().step(d);

                // --- generator step ---
                g.zero_grads();
                d.zero_grads();
                let (loss, l1) = generator_objective_and_grads(
                    g,
                    d,
                    &x,
                    &y,
                    tcfg.lambda_l1,
                    tcfg.saturating_g_loss,
                    dcfg.conditional_on_input,
                )?;
                last_l1 = l1 as f64;
                last_gan = loss as f64 - tcfg.lambda_l1 * l1 as f64;
                g_opt.get_mut(&key).unwrap().step(g);
            }
        }

        if step % tcfg.val_interval == 0 || step == tcfg.max_steps {
            let val = validation_l1(&generators, gcfg, &val_cases, tcfg.val_slices)?;
            log.push(TrainLogRow {
                step,
                d_loss: last_d,
                g_gan: last_gan,
                g_l1: last_l1,
                val_l1_imputed: val,
            });
            if val < best_val {
                best_val = val;
                best_gens = generators.clone();
            }
        }
    }

    let bundle = ModelBundle::new(
        gcfg.clone(),
        grid0.dims,
        grid0.spacing,
        best_gens,
    )?;
    Ok((bundle, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::nn::{Conv2d, Node};
    use ndarray::Array4;

    fn rand4(shape: (usize, usize, usize, usize), seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn gan_loss_half_scores() {
        let half = Tensor::<f64>::from_elem((2, 1, 3, 3), 0.5);
        let v = gan_loss(&half, &half);
        assert!((v + 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn gan_loss_perfect_discriminator_approaches_zero() {
        let real = Tensor::<f64>::from_elem((1, 1, 2, 2), 1.0 - 1e-9);
        let fake = Tensor::<f64>::from_elem((1, 1, 2, 2), 1e-9);
        let v = gan_loss(&real, &fake);
        assert!(v < 0.0 && v > -1e-6, "loss {v}");
    }

    #[test]
    fn gan_loss_extreme_scores_clamped_finite() {
        let real = Tensor::<f64>::zeros((1, 1, 2, 2));
        let fake = Tensor::<f64>::from_elem((1, 1, 2, 2), 1.0);
        assert!(gan_loss(&real, &fake).is_finite());
    }

    #[test]
    fn gan_loss_matches_elementwise_oracle() {
        let real = rand4((2, 1, 4, 4), 1);
        let fake = rand4((3, 1, 2, 5), 2);
        let fast = gan_loss(&real, &fake);
        let slow = real.iter().map(|&p| p.max(1e-7).ln()).sum::<f64>() / real.len() as f64
            + fake.iter().map(|&p| (1.0 - p).max(1e-7).ln()).sum::<f64>() / fake.len() as f64;
        assert!((fast - slow).abs() < 1e-12);
    }

    #[test]
    fn l1_loss_basics() {
        let a = rand4((1, 1, 5, 5), 3);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        let b = a.mapv(|v| v + 0.25);
        assert!((l1_loss(&a, &b).unwrap() - 0.25).abs() < 1e-12);
        let c = Tensor::<f64>::zeros((1, 1, 4, 4));
        assert!(l1_loss(&a, &c).is_err());
        let brute = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / a.len() as f64;
        assert!((l1_loss(&a, &b).unwrap() - brute).abs() < 1e-14);
    }

    #[test]
    fn combined_objective_arithmetic() {
        assert_eq!(combined_generator_objective(0.7, 0.1, 100.0).unwrap(), 10.7);
        assert_eq!(combined_generator_objective(0.42, 9.0, 0.0).unwrap(), 0.42);
        assert!(combined_generator_objective(0.0, 0.0, -1.0).is_err());
    }

    fn tiny_generator(seed: u64) -> Net<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Net {
            nodes: vec![
                Node::Conv(Conv2d::new(2, 3, 3, 1, 1, &mut rng)),
                Node::LeakyRelu { slope: 0.0, cache: None },
                Node::Conv(Conv2d::new(3, 1, 3, 1, 1, &mut rng)),
                Node::Sigmoid { cache: None },
            ],
            in_channels: 2,
        }
    }

    fn tiny_discriminator(seed: u64, cin: usize) -> Net<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Net {
            nodes: vec![
                Node::Conv(Conv2d::new(cin, 2, 4, 2, 1, &mut rng)),
                Node::LeakyRelu { slope: 0.2, cache: None },
                Node::Conv(Conv2d::new(2, 1, 3, 1, 1, &mut rng)),
            ],
            in_channels: cin,
        }
    }

    /// Central finite differences over every parameter of G against the
    /// analytic backprop of the full lambda*L1 + adversarial objective.
    fn run_gradient_check(saturating: bool, conditional: bool, lambda: f64) {
        let mut g = tiny_generator(17);
        let mut d = tiny_discriminator(19, if conditional { 3 } else { 1 });
        let x = rand4((1, 2, 8, 8), 23);
        let y = rand4((1, 1, 8, 8), 29);
        g.zero_grads();
        d.zero_grads();
        generator_objective_and_grads(&mut g, &mut d, &x, &y, lambda, saturating, conditional)
            .unwrap();
        let mut grads = Vec::new();
        g.visit_params(&mut |p| grads.extend(p.grad.iter().copied()));
        let h = 1e-6;
        let mut flat_idx = 0usize;
        let mut max_rel: f64 = 0.0;
        // perturb one coordinate at a time via index bookkeeping
        let n_params = {
            let mut n = 0;
            g.visit_params(&mut |p| n += p.value.len());
            n
        };
        for i in 0..n_params {
            let set = |net: &mut Net<f64>, delta: f64| {
                let mut seen = 0usize;
                net.visit_params(&mut |p| {
                    if i >= seen && i < seen + p.value.len() {
                        p.value[i - seen] += delta;
                    }
                    seen += p.value.len();
                });
            };
            set(&mut g, h);
            let up = generator_objective(&g, &d, &x, &y, lambda, saturating, conditional).unwrap();
            set(&mut g, -2.0 * h);
            let dn = generator_objective(&g, &d, &x, &y, lambda, saturating, conditional).unwrap();
            set(&mut g, h);
            let fd = (up - dn) / (2.0 * h);
            let rel = (fd - grads[flat_idx]).abs() / fd.abs().max(1e-3);
            max_rel = max_rel.max(rel);
            flat_idx += 1;
        }
        assert!(max_rel < 1e-4, "max relative gradient error {max_rel}");
    }

    #[test]
    fn gradient_check_default_objective() {
        run_gradient_check(false, false, 50.0);
    }

    #[test]
    fn gradient_check_saturating_and_conditional() {
        run_gradient_check(true, true, 10.0);
    }

    #[test]
    fn generator_step_decreases_adversarial_loss() {
        // zero-sum structure: a small step along -grad with lambda = 0
        // strictly decreases the adversarial loss on the same batch
        let mut g = tiny_generator(3);
        let mut d = tiny_discriminator(5, 1);
        let x = rand4((2, 2, 8, 8), 7);
        let y = rand4((2, 1, 8, 8), 11);
        g.zero_grads();
        d.zero_grads();
        let (before, _) =
            generator_objective_and_grads(&mut g, &mut d, &x, &y, 0.0, false, false).unwrap();
        for lr in [1e-2, 1e-3, 1e-4] {
            let mut trial = g.clone();
            trial.visit_params(&mut |p| {
                for k in 0..p.value.len() {
                    p.value[k] -= lr * p.grad[k];
                }
            });
            let after = generator_objective(&trial, &d, &x, &y, 0.0, false, false).unwrap();
            if after < before {
                return;
            }
        }
        panic!("no step size decreased the adversarial loss");
    }

    #[test]
    fn adam_is_deterministic_and_moves_params() {
        let run = || {
            let mut g = tiny_generator(13);
            let mut d = tiny_discriminator(15, 1);
            let mut opt = Adam::new(2e-4, 0.5);
            let x = rand4((1, 2, 8, 8), 1);
            let y = rand4((1, 1, 8, 8), 2);
            for _ in 0..3 {
                g.zero_grads();
                d.zero_grads();
                generator_objective_and_grads(&mut g, &mut d, &x, &y, 100.0, false, false)
                    .unwrap();
                opt.step(&mut g);
            }
            let mut flat = Vec::new();
            g.visit_params(&mut |p| flat.extend(p.value.iter().copied()));
            flat
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        let mut init = Vec::new();
        tiny_generator(13).visit_params(&mut |p| init.extend(p.value.iter().copied()));
        assert_ne!(a, init);
    }

    #[test]
    fn train_config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { lambda_l1: -1.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { cut_range_mm: (10.0, 60.0), ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { cut_range_mm: (30.0, 10.0), ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..ok.clone() }.validate().is_err());
    }

    #[test]
    fn evenly_spaced_covers_range() {
        assert_eq!(evenly_spaced(64, 4).len(), 4);
        assert_eq!(evenly_spaced(3, 8), vec![0, 1, 2]);
        let p = evenly_spaced(64, 8);
        assert!(p.windows(2).all(|w| w[0] < w[1]));
        assert!(*p.last().unwrap() < 64);
    }
}
