//! Minimal CNN stack with hand-written backprop, generic over f32/f64 so
//! gradients can be finite-difference checked in 64-bit and trained in
//! 32-bit. Tensors are (batch, channels, H, W); convolutions run as im2col
//! matrix products.

use ndarray::{Array2, Array4, ArrayView2, Axis};
use num_traits::{Float, FromPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FovxError, Result};

pub trait Scalar:
    Float + FromPrimitive + ndarray::LinalgScalar + std::fmt::Debug + Send + Sync + 'static
{
    fn from_f(x: f64) -> Self;
    fn to_f64_(self) -> f64;
}

impl Scalar for f32 {
    fn from_f(x: f64) -> Self {
        x as f32
    }
    fn to_f64_(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f(x: f64) -> Self {
        x
    }
    fn to_f64_(self) -> f64 {
        self
    }
}

pub type Tensor<F> = Array4<F>;

/// Mutable view of one parameter tensor and its gradient accumulator.
pub struct ParamRef<'a, F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: &'a mut [F],
    pub grad: &'a mut [F],
}

#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    /// (out_ch, in_ch * k * k), row-major flat.
    w: Vec<F>,
    b: Vec<F>,
    gw: Vec<F>,
    gb: Vec<F>,
    cache: Option<ConvCache<F>>,
}

#[derive(Debug, Clone)]
struct ConvCache<F> {
    cols: Array2<F>,
    in_shape: (usize, usize, usize, usize),
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> Self {
        // He-style init for the leaky-relu family
        let fan_in = (in_ch * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w = (0..out_ch * in_ch * k * k)
            .map(|_| F::from_f(gauss(rng) * std))
            .collect::<Vec<_>>();
        Self {
            in_ch,
            out_ch,
            k,
            stride,
            pad,
            gw: vec![F::zero(); w.len()],
            w,
            b: vec![F::zero(); out_ch],
            gb: vec![F::zero(); out_ch],
            cache: None,
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let num_h = h + 2 * self.pad;
        let num_w = w + 2 * self.pad;
        if num_h < self.k || num_w < self.k {
            return Err(FovxError::Shape(format!(
                "input {h}x{w} too small for kernel {}",
                self.k
            )));
        }
        Ok(((num_h - self.k) / self.stride + 1, (num_w - self.k) / self.stride + 1))
    }

    fn im2col(&self, x: &Tensor<F>, ho: usize, wo: usize) -> Array2<F> {
        let (nb, c, h, w) = x.dim();
        let k = self.k;
        let mut cols = Array2::<F>::zeros((c * k * k, nb * ho * wo));
        for b in 0..nb {
            for ci in 0..c {
                for ki in 0..k {
                    for kj in 0..k {
                        let row = ci * k * k + ki * k + kj;
                        for oh in 0..ho {
                            let ih = (oh * self.stride + ki) as i64 - self.pad as i64;
                            if ih < 0 || ih >= h as i64 {
                                continue;
                            }
                            for ow in 0..wo {
                                let iw = (ow * self.stride + kj) as i64 - self.pad as i64;
                                if iw < 0 || iw >= w as i64 {
                                    continue;
                                }
                                cols[[row, (b * ho + oh) * wo + ow]] =
                                    x[[b, ci, ih as usize, iw as usize]];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<F>, in_shape: (usize, usize, usize, usize)) -> Tensor<F> {
        let (nb, c, h, w) = in_shape;
        let k = self.k;
        let (ho, wo) = self.out_hw(h, w).expect("shape validated in forward");
        let mut dx = Tensor::<F>::zeros(in_shape);
        for b in 0..nb {
            for ci in 0..c {
                for ki in 0..k {
                    for kj in 0..k {
                        let row = ci * k * k + ki * k + kj;
                        for oh in 0..ho {
                            let ih = (oh * self.stride + ki) as i64 - self.pad as i64;
                            if ih < 0 || ih >= h as i64 {
                                continue;
                            }
                            for ow in 0..wo {
                                let iw = (ow * self.stride + kj) as i64 - self.pad as i64;
                                if iw < 0 || iw >= w as i64 {
                                    continue;
                                }
                                dx[[b, ci, ih as usize, iw as usize]] = dx
                                    [[b, ci, ih as usize, iw as usize]]
                                    + dcols[[row, (b * ho + oh) * wo + ow]];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn apply(&self, cols: &Array2<F>, nb: usize, ho: usize, wo: usize) -> Tensor<F> {
        let wmat = ArrayView2::from_shape((self.out_ch, self.in_ch * self.k * self.k), &self.w)
            .expect("weight shape");
        let y = wmat.dot(cols); // (out, nb*ho*wo)
        let mut out = Tensor::<F>::zeros((nb, self.out_ch, ho, wo));
        for co in 0..self.out_ch {
            let bias = self.b[co];
            for b in 0..nb {
                for oh in 0..ho {
                    for ow in 0..wo {
                        out[[b, co, oh, ow]] = y[[co, (b * ho + oh) * wo + ow]] + bias;
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let (nb, c, h, w) = x.dim();
        if c != self.in_ch {
            return Err(FovxError::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_ch
            )));
        }
        let (ho, wo) = self.out_hw(h, w)?;
        let cols = self.im2col(x, ho, wo);
        Ok(self.apply(&cols, nb, ho, wo))
    }

    pub fn forward_train(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let (nb, c, h, w) = x.dim();
        if c != self.in_ch {
            return Err(FovxError::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_ch
            )));
        }
        let (ho, wo) = self.out_hw(h, w)?;
        let cols = self.im2col(x, ho, wo);
        let out = self.apply(&cols, nb, ho, wo);
        self.cache = Some(ConvCache { cols, in_shape: x.dim() });
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor<F>) -> Result<Tensor<F>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| FovxError::Shape("conv backward without cached forward".into()))?;
        let (nb, _, ho, wo) = dy.dim();
        // (out, nb*ho*wo) layout matching the forward columns
        let mut dymat = Array2::<F>::zeros((self.out_ch, nb * ho * wo));
        for co in 0..self.out_ch {
            let mut gb = F::zero();
            for b in 0..nb {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let g = dy[[b, co, oh, ow]];
                        dymat[[co, (b * ho + oh) * wo + ow]] = g;
                        gb = gb + g;
                    }
                }
            }
            self.gb[co] = self.gb[co] + gb;
        }
        let dw = dymat.dot(&cache.cols.t());
        for (acc, &g) in self.gw.iter_mut().zip(dw.iter()) {
            *acc = *acc + g;
        }
        let wmat = ArrayView2::from_shape((self.out_ch, self.in_ch * self.k * self.k), &self.w)
            .expect("weight shape");
        let dcols = wmat.t().dot(&dymat);
        Ok(self.col2im(&dcols, cache.in_shape))
    }

    fn visit_params<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(ParamRef<'a, F>)) {
        f(ParamRef {
            name: format!("{prefix}.w"),
            shape: vec![self.out_ch, self.in_ch, self.k, self.k],
            value: &mut self.w,
            grad: &mut self.gw,
        });
        f(ParamRef {
            name: format!("{prefix}.b"),
            shape: vec![self.out_ch],
            value: &mut self.b,
            grad: &mut self.gb,
        });
    }

    fn zero_grads(&mut self) {
        self.gw.iter_mut().for_each(|g| *g = F::zero());
        self.gb.iter_mut().for_each(|g| *g = F::zero());
    }
}

/// Standard normal via Box-Muller (shared RNG convention with the phantom).
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[derive(Debug, Clone)]
pub enum Node<F> {
    Conv(Conv2d<F>),
    /// Slope for x < 0; 0.0 is plain ReLU.
    LeakyRelu { slope: f64, cache: Option<Tensor<F>> },
    Sigmoid { cache: Option<Tensor<F>> },
    /// Hard clamp to [0,1]: identity gradient strictly inside the range,
    /// a small leak outside. Unlike a sigmoid head, pixels that reach the
    /// clamp at 0 match a zero target exactly and stop pushing downward,
    /// so mostly-background targets cannot saturate the head; the leak
    /// keeps the clamped region escapable (Adam momentum can otherwise
    /// coast a fully clamped map into a zero-gradient absorbing state).
    Clamp01 { cache: Option<Tensor<F>> },
    Upsample2x,
    /// Residual block: out = x + body(x).
    Res(Vec<Node<F>>),
}

fn upsample2x<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (nb, c, h, w) = x.dim();
    let mut y = Tensor::<F>::zeros((nb, c, 2 * h, 2 * w));
    for b in 0..nb {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x[[b, ci, i, j]];
                    y[[b, ci, 2 * i, 2 * j]] = v;
                    y[[b, ci, 2 * i + 1, 2 * j]] = v;
                    y[[b, ci, 2 * i, 2 * j + 1]] = v;
                    y[[b, ci, 2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
    }
    y
}

fn downsample2x_sum<F: Scalar>(dy: &Tensor<F>) -> Tensor<F> {
    let (nb, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::<F>::zeros((nb, c, h, w));
    for b in 0..nb {
        for ci in 0..c {
            for i in 0..h2 {
                for j in 0..w2 {
                    dx[[b, ci, i / 2, j / 2]] =
                        dx[[b, ci, i / 2, j / 2]] + dy[[b, ci, i, j]];
                }
            }
        }
    }
    dx
}

impl<F: Scalar> Node<F> {
    fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        match self {
            Node::Conv(c) => c.forward(x),
            Node::LeakyRelu { slope, .. } => {
                let s = F::from_f(*slope);
                Ok(x.mapv(|v| if v > F::zero() { v } else { v * s }))
            }
            Node::Sigmoid { .. } => Ok(x.mapv(sigmoid)),
            Node::Clamp01 { .. } => Ok(x.mapv(clamp01)),
            Node::Upsample2x => Ok(upsample2x(x)),
            Node::Res(body) => {
                let mut y = x.clone();
                for node in body {
                    y = node.forward(&y)?;
                }
                if y.dim() != x.dim() {
                    return Err(FovxError::Shape("residual body changed tensor shape".into()));
                }
                Ok(x + &y)
            }
        }
    }

    fn forward_train(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        match self {
            Node::Conv(c) => c.forward_train(x),
            Node::LeakyRelu { slope, cache } => {
                let s = F::from_f(*slope);
                *cache = Some(x.clone());
                Ok(x.mapv(|v| if v > F::zero() { v } else { v * s }))
            }
            Node::Sigmoid { cache } => {
                let y = x.mapv(sigmoid);
                *cache = Some(y.clone());
                Ok(y)
            }
            Node::Clamp01 { cache } => {
                *cache = Some(x.clone());
                Ok(x.mapv(clamp01))
            }
            Node::Upsample2x => Ok(upsample2x(x)),
            Node::Res(body) => {
                let mut y = x.clone();
                for node in body.iter_mut() {
                    y = node.forward_train(&y)?;
                }
                if y.dim() != x.dim() {
                    return Err(FovxError::Shape("residual body changed tensor shape".into()));
                }
                Ok(x + &y)
            }
        }
    }

    fn backward(&mut self, dy: &Tensor<F>) -> Result<Tensor<F>> {
        match self {
            Node::Conv(c) => c.backward(dy),
            Node::LeakyRelu { slope, cache } => {
                let x = cache
                    .take()
                    .ok_or_else(|| FovxError::Shape("activation backward without forward".into()))?;
                let s = F::from_f(*slope);
                let mut dx = dy.clone();
                for (d, &v) in dx.iter_mut().zip(x.iter()) {
                    if v <= F::zero() {
                        *d = *d * s;
                    }
                }
                Ok(dx)
            }
            Node::Sigmoid { cache } => {
                let y = cache
                    .take()
                    .ok_or_else(|| FovxError::Shape("activation backward without forward".into()))?;
                let mut dx = dy.clone();
                for (d, &v) in dx.iter_mut().zip(y.iter()) {
                    *d = *d * v * (F::one() - v);
                }
                Ok(dx)
            }
            Node::Clamp01 { cache } => {
                let x = cache
                    .take()
                    .ok_or_else(|| FovxError::Shape("activation backward without forward".into()))?;
                let leak = F::from_f(CLAMP_LEAK);
                let mut dx = dy.clone();
                for (d, &v) in dx.iter_mut().zip(x.iter()) {
                    if v <= F::zero() || v >= F::one() {
                        *d = *d * leak;
                    }
                }
                Ok(dx)
            }
            Node::Upsample2x => Ok(downsample2x_sum(dy)),
            Node::Res(body) => {
                let mut g = dy.clone();
                for node in body.iter_mut().rev() {
                    g = node.backward(&g)?;
                }
                Ok(&g + dy)
            }
        }
    }

    fn visit_params<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(ParamRef<'a, F>)) {
        match self {
            Node::Conv(c) => c.visit_params(prefix, f),
            Node::Res(body) => {
                for (i, node) in body.iter_mut().enumerate() {
                    node.visit_params(&format!("{prefix}.{i}"), f);
                }
            }
            _ => {}
        }
    }

    fn zero_grads(&mut self) {
        match self {
            Node::Conv(c) => c.zero_grads(),
            Node::Res(body) => body.iter_mut().for_each(Node::zero_grads),
            _ => {}
        }
    }
}

#[inline]
fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Backward slope of `Clamp01` outside [0,1].
const CLAMP_LEAK: f64 = 0.01;

#[inline]
fn clamp01<F: Scalar>(x: F) -> F {
    if x < F::zero() {
        F::zero()
    } else if x > F::one() {
        F::one()
    } else {
        x
    }
}

/// A feed-forward stack of nodes with shared forward/backward plumbing.
#[derive(Debug, Clone)]
pub struct Net<F> {
    pub nodes: Vec<Node<F>>,
    pub in_channels: usize,
}

impl<F: Scalar> Net<F> {
    /// Set every bias of the final convolution so the initial output sits
    /// at `value` (the base rate of the targets) instead of the head's
    /// default midpoint. Mostly-background targets then start close to
    /// their optimum rather than pulling the whole head downward.
    pub fn init_output_bias(&mut self, value: f64) {
        let bias = match self.nodes.last() {
            Some(Node::Sigmoid { .. }) => bias_logit(value),
            _ => value,
        };
        for node in self.nodes.iter_mut().rev() {
            if let Node::Conv(c) = node {
                for b in c.b.iter_mut() {
                    *b = F::from_f(bias);
                }
                return;
            }
        }
    }

    /// Inference pass; no gradient state is recorded.
    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_input(x)?;
        let mut y = x.clone();
        for node in &self.nodes {
            y = node.forward(&y)?;
        }
        Ok(y)
    }

    /// Forward pass that caches activations for a following `backward`.
    pub fn forward_train(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_input(x)?;
        let mut y = x.clone();
        for node in self.nodes.iter_mut() {
            y = node.forward_train(&y)?;
        }
        Ok(y)
    }

    /// Backprop `dy` through the cached forward; accumulates parameter
    /// gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = dy.clone();
        for node in self.nodes.iter_mut().rev() {
            g = node.backward(&g)?;
        }
        Ok(g)
    }

    fn check_input(&self, x: &Tensor<F>) -> Result<()> {
        if x.dim().1 != self.in_channels {
            return Err(FovxError::Shape(format!(
                "network expects {} input channels, got {}",
                self.in_channels,
                x.dim().1
            )));
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.nodes.iter_mut().for_each(Node::zero_grads);
    }

    /// Deterministic-order traversal of all parameter tensors.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(ParamRef<'_, F>)) {
        for (i, node) in self.nodes.iter_mut().enumerate() {
            node.visit_params(&format!("n{i}"), f);
        }
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.len());
        n
    }

}

/// Architecture hyperparameters for one generator; all four generators in a
/// bundle share the same config.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Slab half-width: 2n+1 DWI + 2n+1 T1 channels.
    pub n: usize,
    pub base_width: usize,
    pub n_res_blocks: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { n: 7, base_width: 64, n_res_blocks: 9 }
    }
}

impl GeneratorConfig {
    pub fn in_channels(&self) -> usize {
        2 * (2 * self.n + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(FovxError::Config("generator n must be >= 1".into()));
        }
        if self.n_res_blocks < 1 {
            return Err(FovxError::Config("n_res_blocks must be >= 1".into()));
        }
        if self.base_width < 1 {
            return Err(FovxError::Config("base_width must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub base_width: usize,
    /// When set, D sees the generator input slab concatenated with the
    /// candidate slice (pix2pix-style); default is the unconditional form.
    pub conditional_on_input: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { base_width: 64, conditional_on_input: false }
    }
}

/// Resnet-style encoder/decoder: two stride-2 downsamplings, residual
/// middle, nearest-upsample decoder, sigmoid output in [0,1]. Input H and W
/// must be divisible by 4.
pub fn build_generator<F: Scalar>(cfg: &GeneratorConfig, seed: u64) -> Result<Net<F>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = cfg.base_width;
    let cin = cfg.in_channels();
    let relu = || Node::LeakyRelu { slope: 0.0, cache: None };
    let mut nodes: Vec<Node<F>> = vec![
        Node::Conv(Conv2d::new(cin, b, 3, 1, 1, &mut rng)),
        relu(),
        Node::Conv(Conv2d::new(b, 2 * b, 3, 2, 1, &mut rng)),
        relu(),
        Node::Conv(Conv2d::new(2 * b, 4 * b, 3, 2, 1, &mut rng)),
        relu(),
    ];
    for _ in 0..cfg.n_res_blocks {
        nodes.push(Node::Res(vec![
            Node::Conv(Conv2d::new(4 * b, 4 * b, 3, 1, 1, &mut rng)),
            relu(),
            Node::Conv(Conv2d::new(4 * b, 4 * b, 3, 1, 1, &mut rng)),
        ]));
    }
    nodes.extend([
        Node::Upsample2x,
        Node::Conv(Conv2d::new(4 * b, 2 * b, 3, 1, 1, &mut rng)),
        relu(),
        Node::Upsample2x,
        Node::Conv(Conv2d::new(2 * b, b, 3, 1, 1, &mut rng)),
        relu(),
        Node::Conv(Conv2d::new(b, 1, 3, 1, 1, &mut rng)),
        Node::Clamp01 { cache: None },
    ]);
    Ok(Net { nodes, in_channels: cin })
}

/// Patch discriminator: stride-2 4x4 convolutions ending in a grid of
/// raw logits (no squashing; the loss applies the sigmoid).
pub fn build_discriminator<F: Scalar>(
    dcfg: &DiscriminatorConfig,
    gcfg: &GeneratorConfig,
    seed: u64,
) -> Result<Net<F>> {
    gcfg.validate()?;
    if dcfg.base_width < 1 {
        return Err(FovxError::Config("discriminator base_width must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = dcfg.base_width;
    let cin = if dcfg.conditional_on_input { 1 + gcfg.in_channels() } else { 1 };
    let lrelu = || Node::LeakyRelu { slope: 0.2, cache: None };
    let nodes: Vec<Node<F>> = vec![
        Node::Conv(Conv2d::new(cin, b, 4, 2, 1, &mut rng)),
        lrelu(),
        Node::Conv(Conv2d::new(b, 2 * b, 4, 2, 1, &mut rng)),
        lrelu(),
        Node::Conv(Conv2d::new(2 * b, 4 * b, 4, 2, 1, &mut rng)),
        lrelu(),
        Node::Conv(Conv2d::new(4 * b, 1, 4, 1, 1, &mut rng)),
    ];
    Ok(Net { nodes, in_channels: cin })
}

/// Mean over the last axis pair + batch; used to reduce patch-logit grids.
pub fn mean_all<F: Scalar>(t: &Tensor<F>) -> F {
    let n = F::from_usize(t.len()).unwrap();
    t.iter().fold(F::zero(), |a, &b| a + b) / n
}

/// Stack (H, W) slices into a single-channel batch tensor.
pub fn stack_slices<F: Scalar>(slices: &[Array2<F>]) -> Tensor<F> {
    let (h, w) = slices[0].dim();
    let mut t = Tensor::<F>::zeros((slices.len(), 1, h, w));
    for (b, s) in slices.iter().enumerate() {
        t.index_axis_mut(Axis(0), b)
            .index_axis_mut(Axis(0), 0)
            .assign(s);
    }
    t
}

/// Inverse sigmoid; handy for building constant-output sentinel networks.
pub fn bias_logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}


/// Overwrite the final convolution so the network emits `sigmoid(logit)`
/// everywhere — a constant-output sentinel used by dispatch tests.
pub fn make_constant_output<F: Scalar>(net: &mut Net<F>, value: f64) {
    // the last parameterized node is the output conv (the head is param-free)
    let last = net
        .nodes
        .iter()
        .rposition(|n| matches!(n, Node::Conv(_)))
        .expect("network has at least one convolution");
    let prefix = format!("n{last}.");
    let logit = match net.nodes.last() {
        Some(Node::Sigmoid { .. }) => bias_logit(value),
        _ => value,
    };
    net.visit_params(&mut |p| {
        if let Some(rest) = p.name.strip_prefix(&prefix) {
            let fill = if rest == "b" { F::from_f(logit) } else { F::zero() };
            p.value.iter_mut().for_each(|v| *v = fill);
        }
    });
}
