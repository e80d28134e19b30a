//! The unrolled reconstruction network.
//!
//! A block maps the stacked pair `(scaled data-fidelity gradient, x_{k-1})`
//! through a deterministic convolutional feature extractor and a mean-field
//! Bayesian output convolution to an increment `dx`, and returns
//! `x_k = relu(x_{k-1} + dx)`. In heteroscedastic mode a second branch with
//! its own Bayesian output layer predicts a per-pixel log-variance.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{Tape, Tensor, Var};
use crate::tomo::{data_fidelity_gradient, Geometry, RayTransform, Sinogram};
use crate::variational::MeanFieldGaussianLayer;

/// Bounds applied to predicted log-variances before exponentiation.
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 6.0;

/// Gradient and current iterate.
pub const INPUT_CHANNELS: usize = 2;

/// Samples per forward chunk during batched inference.
const CHUNK: usize = 16;

/// Shrinks the He-initialised output means so an untrained block starts
/// close to the identity update instead of adding large random corrections.
pub const OUTPUT_INIT_GAIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Zero-variance weights, homoscedastic likelihood.
    Dgd,
    /// Mean-field weights, homoscedastic likelihood with trainable variance.
    Bdgd,
    /// Mean-field weights, heteroscedastic likelihood from a variance head.
    BdgdPlus,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Dgd => "dgd",
            Mode::Bdgd => "bdgd",
            Mode::BdgdPlus => "bdgd+",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dgd" => Ok(Mode::Dgd),
            "bdgd" => Ok(Mode::Bdgd),
            "bdgd+" | "bdgdplus" | "bdgd-plus" => Ok(Mode::BdgdPlus),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }

    pub fn is_bayesian(self) -> bool {
        self != Mode::Dgd
    }

    pub fn is_heteroscedastic(self) -> bool {
        self == Mode::BdgdPlus
    }

    fn code(self) -> f64 {
        match self {
            Mode::Dgd => 0.0,
            Mode::Bdgd => 1.0,
            Mode::BdgdPlus => 2.0,
        }
    }

    fn from_code(c: f64) -> Result<Self> {
        match c as i64 {
            0 => Ok(Mode::Dgd),
            1 => Ok(Mode::Bdgd),
            2 => Ok(Mode::BdgdPlus),
            _ => Err(Error::Format(format!("unknown mode code {c}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
}

/// Layer layout shared by every block of a cascade.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arch {
    pub extractor: Vec<ConvSpec>,
    pub output_kernel: usize,
    pub variance: Vec<ConvSpec>,
    pub variance_kernel: usize,
}

impl Arch {
    /// 5x5 then two 3x3 convolutions of `width` channels, a 3x3 Bayesian
    /// output; variance branch of two 3x3 convolutions with `width / 2`
    /// channels and a 3x3 Bayesian output.
    pub fn with_width(width: usize) -> Self {
        let half = (width / 2).max(1);
        Arch {
            extractor: vec![
                ConvSpec { channels: width, kernel: 5 },
                ConvSpec { channels: width, kernel: 3 },
                ConvSpec { channels: width, kernel: 3 },
            ],
            output_kernel: 3,
            variance: vec![
                ConvSpec { channels: half, kernel: 3 },
                ConvSpec { channels: half, kernel: 3 },
            ],
            variance_kernel: 3,
        }
    }

    pub fn standard() -> Self {
        Self::with_width(32)
    }

    /// A single 1x1 Bayesian convolution per branch; for analytic checks.
    pub fn minimal() -> Self {
        Arch {
            extractor: Vec::new(),
            output_kernel: 1,
            variance: Vec::new(),
            variance_kernel: 1,
        }
    }

    fn to_tensor(&self) -> Tensor {
        let mut v = vec![self.extractor.len() as f64];
        for s in &self.extractor {
            v.extend([s.channels as f64, s.kernel as f64]);
        }
        v.push(self.output_kernel as f64);
        v.push(self.variance.len() as f64);
        for s in &self.variance {
            v.extend([s.channels as f64, s.kernel as f64]);
        }
        v.push(self.variance_kernel as f64);
        let n = v.len();
        Tensor::new(&[n], v).expect("flat")
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        let mut it = t.data().iter().map(|&v| v as usize);
        let mut next = || it.next().ok_or_else(|| Error::Format("truncated arch entry".into()));
        let specs = |count: usize, next: &mut dyn FnMut() -> Result<usize>| {
            (0..count)
                .map(|_| Ok(ConvSpec { channels: next()?, kernel: next()? }))
                .collect::<Result<Vec<_>>>()
        };
        let n = next()?;
        let extractor = specs(n, &mut next)?;
        let output_kernel = next()?;
        let m = next()?;
        let variance = specs(m, &mut next)?;
        let variance_kernel = next()?;
        Ok(Arch {
            extractor,
            output_kernel,
            variance,
            variance_kernel,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    fn init(in_channels: usize, spec: ConvSpec, rng: &mut impl Rng) -> Self {
        let fan_in = in_channels * spec.kernel * spec.kernel;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
        ConvLayer {
            kernel: Tensor::from_fn(&[spec.channels, in_channels, spec.kernel, spec.kernel], |_| {
                normal.sample(rng)
            }),
            bias: Tensor::zeros(&[spec.channels]),
        }
    }
}

/// Single-output convolution with mean-field Gaussian kernel and a
/// deterministic bias.
#[derive(Debug, Clone, PartialEq)]
pub struct BayesConv {
    pub weights: MeanFieldGaussianLayer,
    pub bias: Tensor,
}

impl BayesConv {
    fn init(in_channels: usize, kernel: usize, deterministic: bool, rng: &mut impl Rng) -> Self {
        let shape = [1, in_channels, kernel, kernel];
        let mut weights = MeanFieldGaussianLayer::init(&shape, in_channels * kernel * kernel, rng);
        weights.deterministic = deterministic;
        BayesConv {
            weights,
            bias: Tensor::zeros(&[1]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceHead {
    pub layers: Vec<ConvLayer>,
    pub out: BayesConv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    /// 1-based position in the cascade.
    pub index: usize,
    pub extractor: Vec<ConvLayer>,
    pub out: BayesConv,
    pub variance: Option<VarianceHead>,
    /// Scalar `log sigma_k^2` of the homoscedastic likelihood.
    pub log_sigma2: Option<Tensor>,
}

/// Standard-normal draws for every Bayesian layer of a block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockNoise {
    pub mean: Tensor,
    pub variance: Option<Tensor>,
}

/// Tape handles of a block's parameters.
#[derive(Debug, Clone)]
pub struct BlockVars {
    extractor: Vec<(Var, Var)>,
    out_mu: Var,
    out_rho: Option<Var>,
    out_bias: Var,
    variance: Option<(Vec<(Var, Var)>, Var, Option<Var>, Var)>,
    log_sigma2: Option<Var>,
}

impl BlockVars {
    /// Trainable handles, ordered like [`Block::trainable_mut`].
    pub fn trainable(&self) -> Vec<Var> {
        let mut v = Vec::new();
        for (k, b) in &self.extractor {
            v.extend([*k, *b]);
        }
        v.push(self.out_mu);
        v.extend(self.out_rho);
        v.push(self.out_bias);
        if let Some((layers, mu, rho, bias)) = &self.variance {
            for (k, b) in layers {
                v.extend([*k, *b]);
            }
            v.push(*mu);
            v.extend(*rho);
            v.push(*bias);
        }
        v.extend(self.log_sigma2);
        v
    }
}

/// Output of one block on a batch.
#[derive(Debug)]
pub struct BlockOutput {
    pub next: Var,
    /// `[B, 1, n, n]` clamped log-variance (heteroscedastic) or the scalar
    /// `log sigma_k^2` (homoscedastic).
    pub logvar: Var,
}

impl Block {
    pub fn init(index: usize, arch: &Arch, mode: Mode, rng: &mut impl Rng) -> Self {
        let mut extractor = Vec::with_capacity(arch.extractor.len());
        let mut in_ch = INPUT_CHANNELS;
        for spec in &arch.extractor {
            extractor.push(ConvLayer::init(in_ch, *spec, rng));
            in_ch = spec.channels;
        }
        let deterministic = !mode.is_bayesian();
        let mut out = BayesConv::init(in_ch, arch.output_kernel, deterministic, rng);
        out.weights.mu = out.weights.mu.map(|v| v * OUTPUT_INIT_GAIN);
        let (variance, log_sigma2) = if mode.is_heteroscedastic() {
            let mut layers = Vec::with_capacity(arch.variance.len());
            let mut in_ch = INPUT_CHANNELS;
            for spec in &arch.variance {
                layers.push(ConvLayer::init(in_ch, *spec, rng));
                in_ch = spec.channels;
            }
            let out = BayesConv::init(in_ch, arch.variance_kernel, deterministic, rng);
            (Some(VarianceHead { layers, out }), None)
        } else {
            (None, Some(Tensor::scalar(0.0)))
        };
        Block {
            index,
            extractor,
            out,
            variance,
            log_sigma2,
        }
    }

    pub fn bayesian_layers(&self) -> Vec<&MeanFieldGaussianLayer> {
        let mut v = vec![&self.out.weights];
        if let Some(h) = &self.variance {
            v.push(&h.out.weights);
        }
        v
    }

    pub fn kl_to_prior(&self) -> f64 {
        self.bayesian_layers().iter().map(|l| l.kl_to_prior()).sum()
    }

    pub fn draw_noise(&self, rng: &mut impl Rng) -> BlockNoise {
        BlockNoise {
            mean: self.out.weights.standard_noise(rng),
            variance: self.variance.as_ref().map(|h| h.out.weights.standard_noise(rng)),
        }
    }

    /// Noise that selects the posterior means.
    pub fn zero_noise(&self) -> BlockNoise {
        BlockNoise {
            mean: Tensor::zeros(self.out.weights.shape()),
            variance: self.variance.as_ref().map(|h| Tensor::zeros(h.out.weights.shape())),
        }
    }

    /// Mutable access to trainable tensors, ordered like [`BlockVars::trainable`].
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = Vec::new();
        for l in &mut self.extractor {
            v.push(&mut l.kernel);
            v.push(&mut l.bias);
        }
        let det = self.out.weights.deterministic;
        v.push(&mut self.out.weights.mu);
        if !det {
            v.push(&mut self.out.weights.rho);
        }
        v.push(&mut self.out.bias);
        if let Some(h) = &mut self.variance {
            for l in &mut h.layers {
                v.push(&mut l.kernel);
                v.push(&mut l.bias);
            }
            let det = h.out.weights.deterministic;
            v.push(&mut h.out.weights.mu);
            if !det {
                v.push(&mut h.out.weights.rho);
            }
            v.push(&mut h.out.bias);
        }
        if let Some(s) = &mut self.log_sigma2 {
            v.push(s);
        }
        v
    }

    /// Place the parameters on a tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BlockVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let extractor = self
            .extractor
            .iter()
            .map(|l| (leaf(&l.kernel), leaf(&l.bias)))
            .collect();
        let out_mu = leaf(&self.out.weights.mu);
        let out_rho = (!self.out.weights.deterministic).then(|| leaf(&self.out.weights.rho));
        let out_bias = leaf(&self.out.bias);
        let variance = self.variance.as_ref().map(|h| {
            let layers = h.layers.iter().map(|l| (leaf(&l.kernel), leaf(&l.bias))).collect();
            let mu = leaf(&h.out.weights.mu);
            let rho = (!h.out.weights.deterministic).then(|| leaf(&h.out.weights.rho));
            let bias = leaf(&h.out.bias);
            (layers, mu, rho, bias)
        });
        let log_sigma2 = self.log_sigma2.as_ref().map(leaf);
        BlockVars {
            extractor,
            out_mu,
            out_rho,
            out_bias,
            variance,
            log_sigma2,
        }
    }

    /// Closed-form KL of the block's Bayesian layers on a tape; `None` when
    /// every layer is deterministic.
    pub fn kl_on_tape(&self, tape: &mut Tape, vars: &BlockVars) -> Result<Option<Var>> {
        let mut total = self.out.weights.kl_on_tape(tape, vars.out_mu, vars.out_rho)?;
        if let (Some(head), Some((_, mu, rho, _))) = (&self.variance, &vars.variance) {
            if let Some(kl) = head.out.weights.kl_on_tape(tape, *mu, *rho)? {
                total = Some(match total {
                    Some(t) => tape.add(t, kl)?,
                    None => kl,
                });
            }
        }
        Ok(total)
    }

    /// Record the block on a tape. `input` is the `[B, 2, n, n]` stack of
    /// scaled gradient and iterate, `x_prev` the `[B, 1, n, n]` iterate.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &BlockVars,
        input: Var,
        x_prev: Var,
        noise: &BlockNoise,
    ) -> Result<BlockOutput> {
        let (is, xs) = (tape.value(input).shape().to_vec(), tape.value(x_prev).shape().to_vec());
        if is.len() != 4 || is[1] != INPUT_CHANNELS || xs != [is[0], 1, is[2], is[3]] {
            return Err(Error::dim("block input", &is, &xs));
        }
        let mut h = input;
        for (k, b) in &vars.extractor {
            let z = tape.conv2d(h, *k, *b)?;
            h = tape.relu(z);
        }
        let w = self.out.weights.sample_on_tape(tape, vars.out_mu, vars.out_rho, &noise.mean)?;
        let delta = tape.conv2d(h, w, vars.out_bias)?;
        let sum = tape.add(x_prev, delta)?;
        let next = tape.relu(sum);

        let logvar = match (&self.variance, &vars.variance) {
            (Some(head), Some((layers, mu, rho, bias))) => {
                let noise = noise
                    .variance
                    .as_ref()
                    .ok_or_else(|| Error::Contract("variance head needs its own noise".into()))?;
                let mut g = input;
                for (k, b) in layers {
                    let z = tape.conv2d(g, *k, *b)?;
                    g = tape.relu(z);
                }
                let w = head.out.weights.sample_on_tape(tape, *mu, *rho, noise)?;
                let raw = tape.conv2d(g, w, *bias)?;
                tape.clamp(raw, LOGVAR_MIN, LOGVAR_MAX)
            }
            _ => vars
                .log_sigma2
                .ok_or_else(|| Error::Contract("homoscedastic block without log sigma^2".into()))?,
        };
        Ok(BlockOutput { next, logvar })
    }

    /// Evaluate on plain tensors: returns `(x_next, logvar)`, both `[B, 1, n, n]`.
    pub fn forward(&self, input: &Tensor, x_prev: &Tensor, noise: &BlockNoise) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let i = tape.constant(input.clone());
        let x = tape.constant(x_prev.clone());
        let out = self.forward_on_tape(&mut tape, &vars, i, x, noise)?;
        let next = tape.value(out.next).clone();
        let lv = tape.value(out.logvar);
        let logvar = if lv.len() == 1 {
            Tensor::full(next.shape(), lv.item())
        } else {
            lv.clone()
        };
        Ok((next, logvar))
    }
}

/// Stack images into a `[B, 1, n, n]` tensor.
pub fn stack_images(images: &[&Image]) -> Result<Tensor> {
    let n = images
        .first()
        .map(|i| i.size())
        .ok_or_else(|| Error::Contract("cannot stack zero images".into()))?;
    let mut data = Vec::with_capacity(images.len() * n * n);
    for img in images {
        img.check_size(n, "stack_images")?;
        data.extend_from_slice(img.data());
    }
    Tensor::new(&[images.len(), 1, n, n], data)
}

pub fn unstack_images(t: &Tensor) -> Result<Vec<Image>> {
    let s = t.shape();
    if s.len() != 4 || s[1] != 1 || s[2] != s[3] {
        return Err(Error::dim("unstack_images", &[0, 1, 0, 0], s));
    }
    let n = s[2];
    t.data()
        .chunks(n * n)
        .map(|c| Image::from_vec(n, c.to_vec()))
        .collect()
}

/// Block input stack `[B, 2, n, n]` of scaled gradients and iterates.
pub fn block_input(grads: &[&Image], iterates: &[&Image], grad_scale: f64) -> Result<Tensor> {
    let mut g = stack_images(grads)?;
    g.data_mut().iter_mut().for_each(|v| *v *= grad_scale);
    let x = stack_images(iterates)?;
    Tensor::concat_channels(&[&g, &x])
}

/// Final image and per-block log-variance maps of one cascade pass.
#[derive(Debug, Clone)]
pub struct CascadeOutput {
    pub image: Image,
    pub logvars: Vec<Image>,
}

impl CascadeOutput {
    pub fn final_logvar(&self) -> Option<&Image> {
        self.logvars.last()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cascade {
    pub mode: Mode,
    pub arch: Arch,
    pub geometry: Geometry,
    /// Multiplier applied to `A^T (A x - y)` before it enters a block;
    /// `1 / ||A||^2` so the network sees a Landweber-normalized step.
    pub grad_scale: f64,
    pub blocks: Vec<Block>,
}

impl Cascade {
    pub fn new(mode: Mode, arch: Arch, geometry: Geometry, grad_scale: f64) -> Self {
        Cascade {
            mode,
            arch,
            geometry,
            grad_scale,
            blocks: Vec::new(),
        }
    }

    /// Gradient scale `1 / ||A||^2` from 100 power iterations.
    pub fn landweber_scale(op: &RayTransform) -> f64 {
        let l = op.norm_estimate(100);
        1.0 / (l * l)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn draw_noise(&self, rng: &mut impl Rng) -> Vec<BlockNoise> {
        self.blocks.iter().map(|b| b.draw_noise(rng)).collect()
    }

    /// Run all blocks on one measurement.
    pub fn forward(&self, op: &RayTransform, y: &Sinogram, x0: &Image, noise: &[BlockNoise]) -> Result<CascadeOutput> {
        self.forward_observed(op, y, x0, noise, |_, _, _| {})
    }

    /// As [`Cascade::forward`], reporting `(block index, x_{k-1}, A^T(A x_{k-1} - y))`
    /// before each block runs.
    pub fn forward_observed(
        &self,
        op: &RayTransform,
        y: &Sinogram,
        x0: &Image,
        noise: &[BlockNoise],
        mut observe: impl FnMut(usize, &Image, &Image),
    ) -> Result<CascadeOutput> {
        if noise.len() != self.blocks.len() {
            return Err(Error::Contract(format!(
                "{} noise draws for {} blocks",
                noise.len(),
                self.blocks.len()
            )));
        }
        if x0.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Contract("initial iterate must be nonnegative".into()));
        }
        let mut x = x0.clone();
        let mut logvars = Vec::with_capacity(self.blocks.len());
        for (block, eps) in self.blocks.iter().zip(noise) {
            let grad = data_fidelity_gradient(op, &x, y)?;
            observe(block.index, &x, &grad);
            let input = block_input(&[&grad], &[&x], self.grad_scale)?;
            let (next, lv) = block.forward(&input, &x.to_nchw(), eps)?;
            x = Image::from_tensor(&next)?;
            logvars.push(Image::from_tensor(&lv)?);
        }
        Ok(CascadeOutput { image: x, logvars })
    }

    /// Apply one block to many iterates with a shared weight draw. Returns
    /// the next iterates and their log-variance maps.
    pub fn apply_block(
        &self,
        block: usize,
        op: &RayTransform,
        ys: &[&Sinogram],
        xs: &[Image],
        noise: &BlockNoise,
    ) -> Result<(Vec<Image>, Vec<Image>)> {
        let b = &self.blocks[block];
        let mut next = Vec::with_capacity(xs.len());
        let mut logvars = Vec::with_capacity(xs.len());
        for (yc, xc) in ys.chunks(CHUNK).zip(xs.chunks(CHUNK)) {
            let grads = yc
                .iter()
                .zip(xc)
                .map(|(y, x)| data_fidelity_gradient(op, x, y))
                .collect::<Result<Vec<_>>>()?;
            let g: Vec<&Image> = grads.iter().collect();
            let x: Vec<&Image> = xc.iter().collect();
            let input = block_input(&g, &x, self.grad_scale)?;
            let (n, lv) = b.forward(&input, &stack_images(&x)?, noise)?;
            next.extend(unstack_images(&n)?);
            logvars.extend(unstack_images(&lv)?);
        }
        Ok((next, logvars))
    }

    /// Run the whole cascade over a batch of measurements with one weight
    /// draw per block. Returns final images and final log-variance maps.
    pub fn forward_batch(
        &self,
        op: &RayTransform,
        ys: &[&Sinogram],
        x0s: &[Image],
        noise: &[BlockNoise],
    ) -> Result<(Vec<Image>, Vec<Image>)> {
        if noise.len() != self.blocks.len() {
            return Err(Error::Contract(format!(
                "{} noise draws for {} blocks",
                noise.len(),
                self.blocks.len()
            )));
        }
        let mut xs = x0s.to_vec();
        let mut lvs = Vec::new();
        for (k, eps) in noise.iter().enumerate() {
            let (n, lv) = self.apply_block(k, op, ys, &xs, eps)?;
            xs = n;
            lvs = lv;
        }
        Ok((xs, lvs))
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.insert(
            "meta",
            Tensor::new(
                &[3],
                vec![self.mode.code(), self.blocks.len() as f64, self.grad_scale],
            )
            .expect("three fields"),
        );
        c.insert("geometry", self.geometry.to_tensor());
        c.insert("arch", self.arch.to_tensor());
        for b in &self.blocks {
            let p = format!("block{}", b.index);
            for (i, l) in b.extractor.iter().enumerate() {
                c.insert(format!("{p}.conv{i}.kernel"), l.kernel.clone());
                c.insert(format!("{p}.conv{i}.bias"), l.bias.clone());
            }
            c.insert(format!("{p}.bayes.mu"), b.out.weights.mu.clone());
            c.insert(format!("{p}.bayes.rho"), b.out.weights.rho.clone());
            c.insert(format!("{p}.bayes.bias"), b.out.bias.clone());
            if let Some(h) = &b.variance {
                for (i, l) in h.layers.iter().enumerate() {
                    c.insert(format!("{p}.var.conv{i}.kernel"), l.kernel.clone());
                    c.insert(format!("{p}.var.conv{i}.bias"), l.bias.clone());
                }
                c.insert(format!("{p}.var.bayes.mu"), h.out.weights.mu.clone());
                c.insert(format!("{p}.var.bayes.rho"), h.out.weights.rho.clone());
                c.insert(format!("{p}.var.bayes.bias"), h.out.bias.clone());
            }
            if let Some(s) = &b.log_sigma2 {
                c.insert(format!("{p}.log_sigma2"), s.clone());
            }
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = c.require("meta")?.data();
        if meta.len() != 3 {
            return Err(Error::Format("cascade meta needs 3 fields".into()));
        }
        let mode = Mode::from_code(meta[0])?;
        let count = meta[1] as usize;
        let geometry = Geometry::from_tensor(c.require("geometry")?)?;
        let arch = Arch::from_tensor(c.require("arch")?)?;
        let get = |name: String| c.require(&name).cloned();
        let bayes = |p: &str| -> Result<BayesConv> {
            let mut weights = MeanFieldGaussianLayer::new(get(format!("{p}.mu"))?, get(format!("{p}.rho"))?)?;
            weights.deterministic = !mode.is_bayesian();
            Ok(BayesConv {
                weights,
                bias: get(format!("{p}.bias"))?,
            })
        };
        let mut blocks = Vec::with_capacity(count);
        for index in 1..=count {
            let p = format!("block{index}");
            let extractor = (0..arch.extractor.len())
                .map(|i| {
                    Ok(ConvLayer {
                        kernel: get(format!("{p}.conv{i}.kernel"))?,
                        bias: get(format!("{p}.conv{i}.bias"))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let out = bayes(&format!("{p}.bayes"))?;
            let (variance, log_sigma2) = if mode.is_heteroscedastic() {
                let layers = (0..arch.variance.len())
                    .map(|i| {
                        Ok(ConvLayer {
                            kernel: get(format!("{p}.var.conv{i}.kernel"))?,
                            bias: get(format!("{p}.var.conv{i}.bias"))?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                (
                    Some(VarianceHead {
                        layers,
                        out: bayes(&format!("{p}.var.bayes"))?,
                    }),
                    None,
                )
            } else {
                (None, Some(get(format!("{p}.log_sigma2"))?))
            };
            blocks.push(Block {
                index,
                extractor,
                out,
                variance,
                log_sigma2,
            });
        }
        Ok(Cascade {
            mode,
            arch,
            geometry,
            grad_scale: meta[2],
            blocks,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}
